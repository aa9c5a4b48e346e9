# %% [markdown]
# # Verification metrics on a toy example
#
# Genuine scores compare two images of the same person, impostor scores two
# different people. AUC is the chance a random genuine score beats a random
# impostor score; EER is where false accepts equal false rejects.

# %%
import numpy as np

from apgan.evaluation import compute_roc, match_score

genuine = [0.9, 0.8, 0.4]
impostor = [0.7, 0.3, 0.2]
r = compute_roc(genuine, impostor)
print("AUC", r.auc, "(8 of 9 pairs ranked correctly)")
print("EER", round(r.eer, 4))
for (far, tar), t in zip(r.roc_points, r.thresholds):
    print(f"  threshold {t:>5}: FAR {far:.2f}  TAR {tar:.2f}")

# %% [markdown]
# Scores are cosine similarities of deep features.

# %%
print(match_score([1, 2, 3], [4, 5, 6]))

# %% [markdown]
# Only the ranking matters, so any increasing transform leaves AUC unchanged.

# %%
rng = np.random.default_rng(0)
g, i = rng.normal(1, 1, 500), rng.normal(0, 1, 500)
print(compute_roc(g, i).auc, compute_roc(np.exp(g), np.exp(i)).auc)
