"""Backdoor attacks and defenses for hybrid quantum-classical image classifiers.

A numpy-only stack: reverse-mode autodiff, a statevector VQC simulator with
parameter-shift gradients, a small CNN + VQC classifier, trigger families,
NSGA-II trigger search, SSIM / Grad-CAM, STRIP, Neural Cleanse, Fine-Pruning
and concentration-based bound estimators.
"""

from .attacks import (Blend, ColorShift, Patch, PoisonConfig, Qcolor, TriggerTransformer, apply_trigger,
                      poison_dataset, trigger_strength)
from .bounds import (BoundInputs, CompEstimate, estimate_comp, estimate_lipschitz, generalization_lower_bound,
                     hoeffding_tail, min_perturbation)
from .dataset import LabeledDataset, make_digits, make_synthetic, split
from .defenses import (CleanseConfig, PruneConfig, StripConfig, StripDetector, anomaly_index, fine_prune_sweep,
                       neural_cleanse, strip_detect, strip_entropy)
from .io import (DatasetSource, ExperimentConfig, load_checkpoint, load_dataset, parse_config, save_checkpoint,
                 write_results)
from .metrics import EvalReport, attack_success_rate, clean_accuracy, evaluate, grad_cam, mean_ssim, ssim
from .model import HybridClassifier, HybridModel, ModelArch, TrainConfig, train
from .nsga2 import NsgaConfig, crowding_distance, fast_nondominated_sort, nsga2_run
from .quantum import VqcArchitecture, vqc_forward, vqc_gradients

__version__ = "0.1.0"
