"""Feature-space augmentation for long-tailed classification.

Two-phase training: a small CNN (conv blocks, global average pooling, one
linear classifier) is trained on the long-tailed data, then the classifier
alone is fine-tuned on class-balanced batches whose tail entries are
augmented by mixing class-specific feature vectors of tail samples with
class-generic feature vectors of their most confusing head classes.
"""

from feataug.estimator import FeatureAugmentedClassifier

__version__ = "0.1.0"

__all__ = ["FeatureAugmentedClassifier", "__version__"]
