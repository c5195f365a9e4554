"""
A small end-to-end study
========================

Render a corpus in the posterized "synthetic" style, run the ablation grid,
assemble the ensemble and measure the style gap on clean images with the
inverse adapter off and on.  The sizes here are cut down so the script
finishes in a few minutes; the acceptance suite runs the full-size version.
"""

from f2p.study import StudyConfig, control_summary, run_study
from f2p.trainer import pretrain_features

features = pretrain_features(n=600, epochs=4)
cfg = StudyConfig(n_train=400, n_eval=120, n_control=40, train={"max_epochs": 12})
result = run_study(cfg, features, log=print)

# inaccuracy against the average face per region (negative is better)
print(result.ablation.to_text())

# squared error of the fitted blend against fixed local weights
print(result.comparison.to_text())

# clean inputs: the posterizing adapter moves them into the training style
print(result.gap.to_text())
print(control_summary(result))
