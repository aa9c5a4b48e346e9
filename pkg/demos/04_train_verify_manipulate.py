# %% [markdown]
# # End to end at desk scale
#
# Train the attribute predictor, train the generator on half of a 20-subject
# corpus, then check three things on the held-out half: pixel error, face
# verification against the visible gallery, and attribute control.
#
# The default 30 epochs take a few minutes on one CPU core. Set
# APGAN_DEMO_EPOCHS=3 for a quick look (the numbers will be much worse).

# %%
import os
from pathlib import Path

import numpy as np

from apgan.attributes import AttrNetConfig, predict_attributes, sign_accuracy, train_attribute_predictor
from apgan.data import ATTR_INDEX, make_corpus, split_protocol, stack, write_png16
from apgan.evaluation import evaluate_protocol, manipulation_rates, write_protocol_report
from apgan.training import TrainConfig, train

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)
epochs = int(os.environ.get("APGAN_DEMO_EPOCHS", 30))

# %% [markdown]
# The attribute predictor gets its own corpus: 500 subjects, one image each.
# With only 10 training subjects it would memorize identities instead.

# %%
attr_corpus = make_corpus(500, 1, 32, seed=101)
attr_net = train_attribute_predictor(stack(attr_corpus.samples), stack(attr_corpus.samples, "attributes"), AttrNetConfig())
corpus = make_corpus(20, 16, 32, seed=5)
acc = sign_accuracy(predict_attributes(attr_net, stack(corpus.samples)).numpy(), stack(corpus.samples, "attributes"))
print("predictor sign accuracy per attribute:", acc.round(2))

# %%
splits = split_protocol(corpus.subject_ids, num_repeats=1, seed=0)
train_ids, test_ids = splits[0]
cfg = TrainConfig(epochs=epochs, decay_start_epoch=epochs // 2)
result = train(corpus, train_ids, cfg, attr_net, heldout_subjects=test_ids)
for row in result.metrics[:: max(1, epochs // 6)]:
    print(f"epoch {row['epoch']:2d}  L_D {row['L_D']:.3f}  L_1 {row['L_1']:.3f}  held-out L1 {row['heldout_L1']:.3f}")
print(f"held-out L1 before training {result.initial_heldout_l1:.3f}, after {result.metrics[-1]['heldout_L1']:.3f}")

# %% [markdown]
# Verification: features of synthesized faces vs the real visible gallery,
# next to the raw thermal input vs the same gallery.

# %%
report = evaluate_protocol([result.checkpoint], attr_net, corpus, splits, cfg.modality)
write_protocol_report(report, out / "verification")
for method, s in report.summary.items():
    print(f"{method:12s} AUC {s['auc']['mean']:.3f}  EER {s['eer']['mean']:.3f}")

# %% [markdown]
# Attribute control: open the mouth on faces predicted closed, remove the
# mustache on faces predicted to have one.

# %%
test_samples = corpus.select(test_ids)
for name, value in (("Mouth_Slightly_Open", 1.0), ("Mustache", -1.0)):
    r = manipulation_rates(result.generator, attr_net, test_samples, cfg.modality, ATTR_INDEX[name], value)
    print(f"{name} -> {value:+.0f}: predictor moved the right way on {r.direction_rate:.0%} of {r.images} faces, "
          f"crossed zero on {r.sign_flip_rate:.0%}")
    write_png16(out / f"{name.lower()}_before.png", r.before[0].numpy())
    write_png16(out / f"{name.lower()}_after.png", r.after[0].numpy())
print("images and ROC plots in", out)
