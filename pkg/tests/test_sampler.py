import numpy as np
import pytest
import torch

from protodiff.data import synth_two_mode
from protodiff.sampler import SampleRequest, _embed_step, generate, make_grid, select_condition
from protodiff.training import RunConfig, build_state

TINY = dict(T=20, D=8, widths=(8, 8, 8, 8), encoder_widths=(4, 4, 4), heads=2)
SHAPE = (1, 8, 8)


@pytest.fixture(scope="module", params=["pdm", "spdm", "ddpm"])
def state(request):
    return build_state(RunConfig(variant=request.param, K=2, **TINY))


def test_same_seed_same_samples(state):
    req = SampleRequest(count=3, seed=4)
    a = generate(req, state.model, state.schedule, SHAPE)
    b = generate(req, state.model, state.schedule, SHAPE)
    assert np.array_equal(a, b)
    c = generate(SampleRequest(count=3, seed=5), state.model, state.schedule, SHAPE)
    assert not np.array_equal(a, c)


def test_samples_are_finite_and_clamped(state):
    x = generate(SampleRequest(count=5, seed=0), state.model, state.schedule, SHAPE)
    assert x.shape == (5, *SHAPE) and x.dtype == np.float32
    assert np.isfinite(x).all() and x.min() >= -1 and x.max() <= 1


def test_batching_does_not_change_prototype_choice(state):
    req = SampleRequest(count=6, seed=2, proto_index=1 if state.model.variant != "ddpm" else None)
    a = generate(req, state.model, state.schedule, SHAPE, batch_size=6)
    b = generate(req, state.model, state.schedule, SHAPE, batch_size=6)
    assert np.array_equal(a, b)


def test_single_prototype_random_mode_always_picks_it():
    st = build_state(RunConfig(variant="pdm", K=1, **TINY))
    e, idx = select_condition(SampleRequest(count=7, seed=3), st.model)
    assert idx.tolist() == [0] * 7
    assert torch.equal(e, st.model.prototypes.e.detach().expand(7, -1))


def test_random_mode_covers_all_prototypes():
    st = build_state(RunConfig(variant="pdm", K=3, **TINY))
    _, idx = select_condition(SampleRequest(count=300, seed=0), st.model)
    counts = np.bincount(idx.numpy(), minlength=3)
    assert counts.min() > 70


def test_label_conditioning():
    st = build_state(RunConfig(variant="spdm", K=2, **TINY))
    st.model.prototypes.labels = [1, 0]
    _, idx = select_condition(SampleRequest(count=4, label=0), st.model)
    assert idx.tolist() == [1] * 4
    pdm = build_state(RunConfig(variant="pdm", K=2, **TINY))
    with pytest.raises(ValueError):
        select_condition(SampleRequest(count=1, label=0), pdm.model)


def test_reference_image_selects_its_nearest_prototype():
    st = build_state(RunConfig(variant="pdm", K=2, **TINY))
    ref = synth_two_mode(2, 8).images[1]
    _, idx = select_condition(SampleRequest(count=3, reference=ref), st.model)
    from protodiff.prototypes import assign
    want = assign(st.model.encode(torch.from_numpy(ref)), st.model.prototypes).index
    assert idx.tolist() == [int(want)] * 3


def test_invalid_requests():
    st = build_state(RunConfig(variant="pdm", K=2, **TINY))
    with pytest.raises(IndexError):
        select_condition(SampleRequest(count=1, proto_index=2), st.model)
    with pytest.raises(ValueError):
        SampleRequest(label=0, proto_index=1).mode
    with pytest.raises(ValueError):
        generate(SampleRequest(count=0), st.model, st.schedule, SHAPE)


def test_ddpm_has_no_prototype():
    st = build_state(RunConfig(variant="ddpm", K=2, **TINY))
    x, idx = generate(SampleRequest(count=2), st.model, st.schedule, SHAPE, return_indices=True)
    assert idx is None


def test_shortened_chain():
    st = build_state(RunConfig(variant="pdm", K=2, **TINY))
    x = generate(SampleRequest(count=2, t_override=5), st.model, st.schedule, SHAPE)
    assert np.isfinite(x).all()
    from protodiff.schedule import linear_schedule
    short = linear_schedule(5, 1e-4, 0.02)
    steps = [_embed_step(t, short, st.model) for t in range(5, 0, -1)]
    assert steps == [20, 16, 12, 8, 4] and all(1 <= s <= 20 for s in steps)


@pytest.mark.parametrize("n,rows,cols", [(16, 4, 4), (1, 1, 1), (5, 2, 3), (10, 3, 4)])
def test_grid_layout(n, rows, cols):
    imgs = np.stack([np.full((1, 2, 3), i / n, dtype=np.float32) for i in range(n)])
    g = make_grid(imgs)
    assert g.shape == (1, rows * 2, cols * 3)
    for i in range(n):
        r, c = divmod(i, cols)
        assert np.all(g[:, 2 * r:2 * r + 2, 3 * c:3 * c + 3] == i / n)
