# Test wiring for running the Django test modules under plain pytest.
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'SegmentationAdaptation.settings')
django.setup()
