"""Progressive multi-attribute classification with a shared base network.

A base network is trained on one attribute, then per-attribute branch
networks are attached one at a time, each followed by a joint fine-tune, and
finally tuned with the base frozen. Individual per-attribute models and a
one-hot multi-label model are provided as baselines.
"""

from .data import (ArticleSchema, AttributeSpec, Dataset, SyntheticConfig, attribute_view,
                   complete_view, generate_synthetic, load_manifest, oracle_decode, preset,
                   split_train_test, write_manifest)
from .metrics import (EvalReport, attribute_accuracy, evaluate, occlusion_probe, overall_accuracy,
                      precision_recall_curve)
from .models import (Ensemble, MultiLabelModel, NetConfig, ProgressiveModel, attach_branch,
                     build_individual, build_multilabel, build_progressive, build_reference_init,
                     count_params, forward_shared, predict)
from .persistence import load_model, save_model, size_report
from .training import (PhaseLog, TrainConfig, add_attribute, differential_lr_assign,
                       reorder_experiment, train_individual, train_multilabel, train_progressive)

__version__ = "0.1.0"
