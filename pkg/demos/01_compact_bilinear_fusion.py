# %% [markdown]
# # Compact bilinear fusion in a few lines
#
# The generator fuses a 512-d image code with the 10-d attribute vector. The
# full outer product would be 5120 numbers; a count sketch of each vector,
# circularly convolved, keeps the same inner products in expectation in far
# fewer dimensions.

# %%
import numpy as np

from apgan.mcb import circular_convolve_direct, count_sketch, make_sketch_plan, mcb_pool

# %% [markdown]
# A sketch plan is a bucket index and a sign for every input coordinate.

# %%
plan = make_sketch_plan(input_dim=6, sketch_dim=4, seed=0)
print("buckets", plan.bucket, "signs", plan.sign)
v = np.arange(1.0, 7.0)
print("sketch of", v, "->", count_sketch(v, plan))
print("same thing as a matrix product:", v @ plan.matrix())

# %% [markdown]
# Inner products survive sketching on average. Here 200 independent plans
# estimate the cosine of two 64-d unit vectors.

# %%
rng = np.random.default_rng(0)
x = rng.normal(size=64)
y = x + rng.normal(size=64)
x /= np.linalg.norm(x)
y /= np.linalg.norm(y)
estimates = [count_sketch(x, p) @ count_sketch(y, p) for p in (make_sketch_plan(64, 256, s) for s in range(200))]
print(f"true {x @ y:.4f}  mean estimate {np.mean(estimates):.4f}  spread {np.std(estimates):.4f}")

# %% [markdown]
# The pooled vector is the circular convolution of the two sketches, done
# with FFTs. The direct O(D^2) sum is kept around as a check.

# %%
pa, pb = make_sketch_plan(16, 32, 1), make_sketch_plan(10, 32, 2)
a, b = rng.normal(size=16), rng.normal(size=10)
fast = mcb_pool(a, b, pa, pb)
slow = circular_convolve_direct(count_sketch(a, pa), count_sketch(b, pb))
print("max |fft - direct| =", np.abs(fast - slow).max())

# %% [markdown]
# And the pooled features approximate outer-product inner products:
# E<mcb(x1,y1), mcb(x2,y2)> = <x1,x2><y1,y2>.

# %%
x1, y1 = rng.normal(size=16), rng.normal(size=10)
x2, y2 = x1 + 0.5 * rng.normal(size=16), y1 + 0.5 * rng.normal(size=10)
target = (x1 @ x2) * (y1 @ y2)
est = np.mean([
    mcb_pool(x1, y1, make_sketch_plan(16, 128, 2 * s), make_sketch_plan(10, 128, 2 * s + 1))
    @ mcb_pool(x2, y2, make_sketch_plan(16, 128, 2 * s), make_sketch_plan(10, 128, 2 * s + 1))
    for s in range(300)
])
print(f"outer-product inner product {target:.3f}, sketched estimate {est:.3f}")
