"""Size-variant classification of retail shelf boxes from relative box sizes.

Two interchangeable methods share the same scale-invariant inputs:

* ``gbdt``: per-group histograms of context aspect/area ratios fed to boosted trees;
* ``setnet``: GMM class posteriors per context box fed to a mean-pooling set network.
"""

from .catalog import (Catalog, CandidateFeatures, DetectedBox, GroupSpec, Scene, VariantSpec,
                      aspect_ratio, extract_candidate_features, frontal_area, validate_scene)
from .pipeline import (EvalReport, ModelBundle, compare_methods, evaluate, infer_scene,
                       load_bundle, save_bundle, split_scenes, train_bundle)
from .synthgen import NoiseConfig, SceneConfig, generate_catalog, generate_dataset

__version__ = "0.1.0"
