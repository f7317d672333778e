from django import forms
from django.core.exceptions import ValidationError

from .utils.synthdata import BENCHMARKS


class StrictBooleanField(forms.Field):
    """Accepts true/false, yes/no, on/off, 1/0; anything else is an error."""

    TRUE = {'true', 'yes', 'on', '1'}
    FALSE = {'false', 'no', 'off', '0'}

    def to_python(self, value):
        if value in (None, ''):
            return None
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in self.TRUE:
            return True
        if text in self.FALSE:
            return False
        raise ValidationError(f'expected a boolean (true/false), got {value!r}')


class ArchConfigForm(forms.Form):
    levels = forms.IntegerField(min_value=1, max_value=5, required=False)
    base_channels = forms.IntegerField(min_value=2, required=False)
    kernel = forms.IntegerField(min_value=1, required=False)
    dropout_rate = forms.FloatField(min_value=0.0, required=False)

    def clean_kernel(self):
        kernel = self.cleaned_data['kernel']
        if kernel is not None and kernel % 2 == 0:
            raise ValidationError('kernel must be odd')
        return kernel

    def clean_dropout_rate(self):
        rate = self.cleaned_data['dropout_rate']
        if rate is not None and rate >= 1.0:
            raise ValidationError('dropout_rate must be below 1')
        return rate


class DataConfigForm(forms.Form):
    benchmark = forms.ChoiceField(choices=[(name, name) for name in BENCHMARKS], required=False)
    n_cases = forms.IntegerField(min_value=3, required=False)
    seed = forms.IntegerField(min_value=0, required=False)


class PretrainConfigForm(forms.Form):
    epochs = forms.IntegerField(min_value=0, required=False)
    lr = forms.FloatField(required=False)
    lr_decay = forms.FloatField(required=False)
    lr_decay_every = forms.IntegerField(min_value=1, required=False)
    batch_size = forms.IntegerField(min_value=1, required=False)
    seed = forms.IntegerField(min_value=0, required=False)

    def clean(self):
        cleaned = super().clean()
        for name in ('lr', 'lr_decay'):
            value = cleaned.get(name)
            if value is not None and value <= 0:
                self.add_error(name, f'{name} must be positive')
        return cleaned


class AdaptConfigForm(forms.Form):
    K = forms.IntegerField(min_value=1, max_value=8, required=False)
    tau = forms.FloatField(required=False)
    lam = forms.FloatField(min_value=0.0, required=False)
    lr = forms.FloatField(required=False)
    epochs = forms.IntegerField(min_value=0, required=False)
    finetune_epochs = forms.IntegerField(min_value=0, required=False)
    batch_mode = forms.CharField(required=False)
    cleanup = StrictBooleanField(required=False)
    same_pass_labels = StrictBooleanField(required=False)
    val_tau = forms.FloatField(required=False)
    seed = forms.IntegerField(min_value=0, required=False)
    use_M = StrictBooleanField(required=False)
    use_TDG_dropout = StrictBooleanField(required=False)
    use_T = StrictBooleanField(required=False)
    use_TFS = StrictBooleanField(required=False)
    use_Lment = StrictBooleanField(required=False)
    use_pseudo_dice = StrictBooleanField(required=False)

    def clean_batch_mode(self):
        value = self.cleaned_data['batch_mode']
        if value in (None, ''):
            return None
        if value == 'volume':
            return value
        try:
            size = int(value)
        except ValueError:
            raise ValidationError('batch_mode must be "volume" or a positive integer')
        if size < 1:
            raise ValidationError('batch_mode must be "volume" or a positive integer')
        return size

    def clean(self):
        cleaned = super().clean()
        for name in ('tau', 'val_tau'):
            value = cleaned.get(name)
            if value is not None and not 0.0 < value < 1.0:
                self.add_error(name, f'{name} must lie in (0, 1)')
        lr = cleaned.get('lr')
        if lr is not None and lr <= 0:
            self.add_error('lr', 'lr must be positive')
        return cleaned
