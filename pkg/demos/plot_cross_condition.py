"""
Clean versus natural: ablations and cross-condition transfer
============================================================

Trains the three variants (2D-CAN, TS-CAN and TS-DAN with three ECA gates)
on natural-condition clips, then runs the clean-to-natural and
natural-to-clean transfer protocol for TS-DAN.  The model is the reduced
configuration, so numbers are indicative only.
"""

# %%
# Shared data
# -----------
from tsdan import metrics, synth, train
from tsdan.model import ModelConfig

kw = dict(hr_range=(50, 150), rr_range=(8, 24), render=False)
clean_train = synth.make_dataset(8, "clean", seed=20, **kw).clips
natural_train = synth.make_dataset(8, "natural", seed=21, **kw).clips
clean_eval = synth.make_dataset(2, "clean", seed=22, **kw).clips
natural_eval = synth.make_dataset(2, "natural", seed=23, **kw).clips
small = dict(input_hw=36, conv_widths=(8, 16), dense_units=32)
cfg = train.TrainConfig(steps=200, seed=0, train_condition="natural", eval_condition="natural")

# %%
# Ablation on natural clips
# -------------------------
# Identical seeds and step budget for every variant.  Only TS-DAN carries
# ECA gates; the temporal shift is what separates TS-CAN from 2D-CAN.
rows = []
for variant, eca in (("can2d", 0), ("tscan", 0), ("tsdan", 3)):
    res = train.run(cfg, ModelConfig(variant=variant, eca_count=eca, **small), natural_train, natural_eval)
    rows.append((variant, res.evaluation.reports["hr"]))
print(metrics.format_table(rows))

# %%
# Cross-condition transfer
# ------------------------
# C2N trains on clean clips and tests on natural ones; N2C does the reverse.
runs = train.cross_condition(ModelConfig(**small), cfg, clean_train, natural_train, clean_eval, natural_eval)
print(metrics.format_table([(f"TS-DAN {tag}", r.evaluation.reports["hr"]) for tag, r in runs.items()]))
