"""
Noising and denoising a toy image
=================================

Run the closed-form forward process on one two-mode image, check it against
the step-by-step chain, then undo the last step with the true noise.
"""

import numpy as np

from protodiff import forward_chain, forward_sample, linear_schedule, predict_x0, reverse_step
from protodiff.data import save_png, synth_two_mode
from protodiff.sampler import make_grid

schedule = linear_schedule(1000)
print("alpha_bar at t=1, 500, 1000:", [round(schedule.alpha_bar_at(t), 5) for t in (1, 500, 1000)])

x0 = synth_two_mode(2, 16).images[0]
rng = np.random.default_rng(0)

# a strip of x_t for increasing t, all from the same noise draw
eps = rng.standard_normal(x0.shape)
steps = [1, 50, 100, 250, 500, 1000]
strip = np.stack([forward_sample(x0, t, eps, schedule).x_t for t in steps])
save_png(make_grid(strip, ncols=len(steps), pad=1), "forward_strip.png")
print("wrote forward_strip.png for t =", steps)

# the closed form and the chain agree in distribution
n = 5000
chain = forward_chain(np.full(n, 0.7), 500, schedule, rng)
print(f"t=500 chain mean {chain.mean():.4f} vs {np.sqrt(schedule.alpha_bar_at(500)) * 0.7:.4f}, "
      f"var {chain.var():.4f} vs {1 - schedule.alpha_bar_at(500):.4f}")

# with the true noise the x0 estimate is exact, and the last reverse step lands on x0
x1 = forward_sample(x0, 1, eps, schedule).x_t
print("x0 recovery error:", np.abs(predict_x0(x1, eps, 1, schedule) - x0).max())
print("t=1 reverse step error:", np.abs(reverse_step(x1, eps, 1, np.zeros_like(x0), schedule) - x0).max())
