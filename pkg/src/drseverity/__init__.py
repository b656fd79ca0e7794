"""Diabetic-retinopathy severity grading from fundus images.

A vessel segmenter (modified UNet++) produces masks used to paint vessels out
of each image; two ordinal EfficientNet classifiers grade the original and
the cleaned image, and a small fusion network combines their grades.
"""

__version__ = "0.1.0"
