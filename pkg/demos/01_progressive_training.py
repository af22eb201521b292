"""
Progressive training on a synthetic jeans task
==============================================

Generate a noise-free three-attribute dataset, train the shared base and
its branches one attribute at a time, and look at the phase log.
"""

from progattr import SyntheticConfig, TrainConfig, evaluate, generate_synthetic, preset
from progattr import split_train_test, train_progressive

# Every attribute draws its pattern inside its own horizontal band.
# About 30% of each attribute's labels are hidden.
config = SyntheticConfig(preset("jeans"), seed=0, missing=0.3)
dataset, truth = generate_synthetic(config, 1000)
train, test = split_train_test(dataset, 0.8, seed=0)
print(f"{len(train)} training samples, {len(test)} test samples")

# P1 trains the base with the first branch. Each later attribute adds a branch
# (P2) and then a round-robin fine-tune of everything attached so far (P3).
# P4 freezes the base and polishes the branches.
model, log = train_progressive(train, TrainConfig(seed=0))
print(log.to_text())

report = evaluate(model, test)
for attribute, accuracy in report.per_attribute.items():
    print(f"{attribute:10s} {accuracy:6.2f}%")
print(f"{'Overall':10s} {report.overall:6.2f}%")
