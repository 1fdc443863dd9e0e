import numpy as np
import pytest

from impgame.model import ActionSet, ProblemSpec


def make_spec(
    dim=1,
    drift=None,
    sigma=0.0,
    running=None,
    terminal=None,
    jump_p1=None,
    jump_p2=None,
    cost_p1=None,
    cost_p2=None,
    delta=0.1,
    box=3.0,
    actions=(-1.0, 1.0),
    **kw,
):
    """Small hand-built instance; unspecified pieces are zero or the cost floor."""

    def zero_vec(t, x, *a):
        return np.zeros(np.broadcast_shapes(np.shape(x), *(np.shape(v)[:-1] + (dim,) for v in a)))

    def const_sigma(t, x):
        return np.broadcast_to(sigma * np.eye(dim), np.shape(x)[:-1] + (dim, dim))

    def floor(t, x, a):
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1]), delta)

    return ProblemSpec(
        name=kw.pop("name", "hand-built"),
        horizon=kw.pop("horizon", 1.0),
        dim=dim,
        drift=drift or zero_vec,
        diffusion=const_sigma,
        running_cost=running or (lambda t, x: np.zeros(np.shape(x)[:-1])),
        terminal=terminal or (lambda x: np.zeros(np.shape(x)[:-1])),
        jump_p1=jump_p1 or zero_vec,
        jump_p2=jump_p2 or zero_vec,
        cost_p1=cost_p1 or floor,
        cost_p2=cost_p2 or floor,
        actions_p1=ActionSet([actions[0]], [actions[1]]),
        actions_p2=ActionSet([actions[0]], [actions[1]]),
        box_lo=-box * np.ones(dim),
        box_hi=box * np.ones(dim),
        delta=delta,
        **kw,
    )


@pytest.fixture
def spec_factory():
    return make_spec
