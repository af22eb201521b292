"""
Progressive model against the two baselines
===========================================

With 40% of labels missing, the multi-label baseline can only use samples
that carry every label. The progressive model trains each branch on every
sample that has that attribute.
"""

from progattr import (Ensemble, SyntheticConfig, TrainConfig, attribute_view, complete_view,
                      evaluate, generate_synthetic, preset, split_train_test, train_individual,
                      train_multilabel, train_progressive)
from progattr.cli import comparison_table

config = SyntheticConfig(preset("jeans"), seed=1, missing=0.4)
dataset, _ = generate_synthetic(config, 1000)
train, test = split_train_test(dataset, 0.8, seed=1)

# How much data each family gets to see.
print("complete view:", len(complete_view(train)))
for name in train.schema.names:
    print(f"{name} view:", len(attribute_view(train, name)))

cfg = TrainConfig(seed=1)
reports = {
    "Individual": evaluate(Ensemble([train_individual(train, a, cfg)[0] for a in train.schema.names]), test),
    "Multi-Label": evaluate(train_multilabel(train, cfg)[0], test),
    "Progressive": evaluate(train_progressive(train, cfg)[0], test),
}
print(comparison_table(reports, train.schema.names))
