import numpy as np
import pytest
from numpy.testing import assert_allclose

from trumpetflow import diffcore as dc
from trumpetflow.diffcore import ContractError
from trumpetflow.model import (
    Architecture,
    ArchitectureMismatchError,
    CheckpointError,
    CTrumpetModel,
    MAPPreconditionError,
    architecture_summary,
    expansion_dims,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from trumpetflow.nets import ETA, GAMMA

from tests.helpers import perturb

Y = np.array([0.4, -1.1])


@pytest.fixture
def random_model(tiny_arch, rng):
    model = CTrumpetModel(tiny_arch)
    perturb(rng, model.parameters(), scale=0.2)
    return model


@pytest.fixture
def identity_model(tiny_arch):
    model = CTrumpetModel(tiny_arch)
    model.to_identity()
    return model


def g_forward(model, z_prime, y):
    z_prime = np.atleast_2d(z_prime)
    y = np.repeat(np.atleast_2d(y), z_prime.shape[0], axis=0) if np.ndim(y) == 1 else y
    return model.g_forward_tensor(dc.constant(z_prime), dc.constant(y)).data


# --- architecture ----------------------------------------------------------

def test_expansion_dims():
    assert expansion_dims(2, 3) == [2, 3]
    assert expansion_dims(32, 256) == [32, 64, 128, 256]
    assert expansion_dims(4, 4) == [4]


@pytest.mark.parametrize("kwargs", [
    dict(latent_dim=1, data_dim=3, cond_dim=1),
    dict(latent_dim=4, data_dim=3, cond_dim=1),
    dict(latent_dim=2, data_dim=3, cond_dim=0),
    dict(latent_dim=2, data_dim=3, cond_dim=1, h_mode="additive"),
])
def test_architecture_rejects_invalid_dims(kwargs):
    with pytest.raises(ValueError):
        Architecture(**kwargs)


def test_architecture_dict_roundtrip(tiny_arch):
    assert Architecture.from_dict(tiny_arch.to_dict()) == tiny_arch
    with pytest.raises(CheckpointError):
        Architecture.from_dict(dict(tiny_arch.to_dict(), depth=3))


def test_injective_blocks_only_in_g():
    model = CTrumpetModel(Architecture(latent_dim=2, data_dim=8, cond_dim=3, g_blocks=3, h_blocks=2, hidden_width=4))
    assert not any(layer.injective for layer in model.h_layers)
    assert [layer.out_dim for layer in model.g_layers if layer.injective] == [4, 8]
    assert len(model.g_layers) == 5
    assert model.g_layers[-1].out_dim == 8


def test_parameter_groups_partition_the_model(tiny_model):
    gamma = {p.name for p in tiny_model.parameters(GAMMA)}
    eta = {p.name for p in tiny_model.parameters(ETA)}
    assert gamma and eta and not gamma & eta
    assert all(name.startswith("g.") for name in gamma)
    assert all(name.startswith("h.") for name in eta)
    counts = architecture_summary(tiny_model)
    assert counts[GAMMA] + counts[ETA] == sum(p.value.size for p in tiny_model.parameters())


def test_same_architecture_builds_same_model(tiny_arch):
    a, b = CTrumpetModel(tiny_arch), CTrumpetModel(tiny_arch)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)


# --- identity model ------------------------------------------------------

def test_identity_model_samples_zero_padded_latent(identity_model):
    z = np.array([0.7, -1.3])
    assert_allclose(identity_model.sample(Y, z), [0.7, -1.3, 0.0, 0.0])


def test_identity_model_pinv_truncates(identity_model):
    x = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 9.0, 9.0]])
    assert_allclose(identity_model.g_pinv(x, Y), x[:, :2])


def test_identity_model_loglik_at_origin(identity_model):
    x = np.array([0.0, 0.0, 5.0, -2.0])
    assert identity_model.intermediate_loglik(x, Y) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_actnorm_scale_shifts_loglik_by_log_volume(identity_model):
    identity_model.actnorms(ETA)[0].set_scale([0.0, 0.0], [2.0, 2.0])
    x = np.array([0.5, -0.25, 0.0, 0.0])
    z = 2.0 * x[:2]
    expected = -np.log(2 * np.pi) - 0.5 * z @ z + 2.0 * np.log(2.0)
    assert identity_model.intermediate_loglik(x, Y) == pytest.approx(expected, abs=1e-12)


def test_identity_model_cannot_have_skip_connections(tiny_arch):
    model = CTrumpetModel(Architecture(**dict(tiny_arch.to_dict(), skip_connections=True)))
    with pytest.raises(ContractError):
        model.to_identity()


# --- random model --------------------------------------------------------

def test_sample_is_deterministic_given_z(random_model, rng):
    z = rng.normal(size=(5, 2))
    assert np.array_equal(random_model.sample(Y, z), random_model.sample(Y, z))


def test_sample_draws_from_random_source(random_model):
    first = random_model.sample(np.tile(Y, (3, 1)), rng=np.random.default_rng(5))
    second = random_model.sample(np.tile(Y, (3, 1)), rng=np.random.default_rng(5))
    assert first.shape == (3, 4)
    assert np.array_equal(first, second)
    with pytest.raises(ContractError):
        random_model.sample(Y)


def test_sample_is_injective_in_z(random_model, rng):
    for _ in range(20):
        z, other = rng.normal(size=(2, 2))
        assert not np.allclose(random_model.sample(Y, z), random_model.sample(Y, other), atol=1e-9)


def test_g_pinv_recovers_intermediate_latent(random_model, rng):
    z_prime = rng.normal(size=(6, 2))
    x = g_forward(random_model, z_prime, Y)
    assert_allclose(random_model.g_pinv(x, Y), z_prime, atol=1e-8)
    assert_allclose(random_model.range_project(x, Y), x, atol=1e-8)


def test_intermediate_latents_invert_sampling(random_model, rng):
    z = rng.normal(size=(6, 2))
    assert_allclose(random_model.intermediate_latents(random_model.sample(Y, z), Y), z, atol=1e-8)


def test_range_projection_of_off_range_points(random_model, rng):
    x = rng.normal(size=(4, 4))
    projected = random_model.range_project(x, Y)
    assert np.all(np.linalg.norm(x - projected, axis=1) > 1e-6)
    assert_allclose(random_model.range_project(projected, Y), projected, atol=1e-8)


def test_linear_g_projects_orthogonally(identity_model, rng):
    expander = identity_model.g_layers[0]
    assert expander.injective
    expander.linear.free.value = rng.normal(size=expander.linear.free.shape)
    p = expander.linear.projection_matrix()
    x = rng.normal(size=4)
    assert_allclose(identity_model.range_project(x, Y), p @ x, atol=1e-12)


def test_loglik_matches_bruteforce_change_of_variables(rng):
    arch = Architecture(latent_dim=3, data_dim=4, cond_dim=2, g_blocks=1, h_blocks=3,
                        hidden_width=6, cond_width=3, seed=9)
    model = CTrumpetModel(arch)
    perturb(rng, model.parameters(), scale=0.3)
    y = dc.constant(Y.reshape(1, 2))
    z_prime = rng.normal(size=3)

    z, _ = model.h_inverse_tensor(dc.constant(z_prime.reshape(1, 3)), y)

    def h(v):
        out, _ = model.h_forward_tensor(dc.reshape(v, (1, 3)), y)
        return dc.reshape(out, (3,))

    jac = dc.jacobian(h, z.data[0])
    log_p = -1.5 * np.log(2 * np.pi) - 0.5 * z.data[0] @ z.data[0]
    expected = log_p - np.linalg.slogdet(jac)[1]
    assert model.intermediate_loglik_latent(z_prime, Y) == pytest.approx(expected, abs=1e-7)


def test_bruteforce_data_loglik_reduces_to_latent_loglik_for_identity_g(identity_model, rng):
    perturb(rng, identity_model.parameters(ETA), scale=0.3)
    x = identity_model.sample(Y, rng.normal(size=2))
    assert identity_model.data_loglik_bruteforce(x, Y) == pytest.approx(
        identity_model.intermediate_loglik(x, Y), abs=1e-7)


def test_bruteforce_data_loglik_limits_dimension():
    model = CTrumpetModel(Architecture(latent_dim=2, data_dim=9, cond_dim=1, g_blocks=0, h_blocks=1, hidden_width=4))
    with pytest.raises(ContractError):
        model.data_loglik_bruteforce(np.zeros(9), [0.0])


def test_array_api_checks_widths(random_model):
    with pytest.raises(dc.ShapeError):
        random_model.g_pinv(np.zeros(3), Y)
    with pytest.raises(dc.ShapeError):
        random_model.sample(np.zeros(3), np.zeros(2))
    with pytest.raises(dc.ShapeError):
        random_model.g_pinv(np.zeros((3, 4)), np.zeros((2, 2)))


# --- surrogate MAP -------------------------------------------------------

def test_surrogate_map_needs_fvc(random_model):
    with pytest.raises(MAPPreconditionError, match="fvc"):
        random_model.surrogate_map(Y)


def test_surrogate_map_of_identity_model_is_zero(tiny_arch):
    model = CTrumpetModel(Architecture(**dict(tiny_arch.to_dict(), h_mode="fvc")))
    model.to_identity()
    assert_allclose(model.surrogate_map(Y), np.zeros(4), atol=1e-15)


def test_surrogate_map_lies_on_the_manifold(tiny_arch, rng):
    model = CTrumpetModel(Architecture(**dict(tiny_arch.to_dict(), h_mode="fvc", skip_connections=True)))
    perturb(rng, model.parameters(), scale=0.2)
    ys = rng.normal(size=(3, 2))
    estimate = model.surrogate_map(ys)
    assert estimate.shape == (3, 4)
    assert_allclose(model.range_project(estimate, ys), estimate, atol=1e-8)


def test_surrogate_map_maximizes_intermediate_loglik_on_a_grid(rng):
    model = CTrumpetModel(Architecture(latent_dim=2, data_dim=2, cond_dim=2, g_blocks=0, h_blocks=3,
                                       h_mode="fvc", hidden_width=6, cond_width=3, seed=4))
    perturb(rng, model.parameters(), scale=0.2)
    estimate = model.surrogate_map(Y)

    offsets = np.linspace(-3.0, 3.0, 200)
    step = offsets[1] - offsets[0]
    center = estimate + np.array([0.37, -0.21])
    grid = np.stack(np.meshgrid(center[0] + offsets, center[1] + offsets, indexing="ij"), axis=-1).reshape(-1, 2)
    best = grid[np.argmax(model.intermediate_loglik(grid, Y))]
    assert np.linalg.norm(best - estimate) <= 3 * step


# --- actnorm init ----------------------------------------------------------

def test_initialize_actnorms_per_group(tiny_model, rng):
    x = rng.normal(size=(64, 4))
    tiny_model.initialize_actnorms(x, Y, ETA)
    assert all(a.initialized for a in tiny_model.actnorms(ETA))
    z = tiny_model.intermediate_latents(x, Y)
    # h.0 is inverted last, so its ActNorm standardizes the recovered latents
    assert_allclose(z.mean(axis=0), 0.0, atol=1e-8)
    assert_allclose(z.std(axis=0), 1.0, atol=1e-8)
    with pytest.raises(ValueError):
        tiny_model.initialize_actnorms(x, Y, "both")


# --- checkpoints ---------------------------------------------------------

def test_checkpoint_roundtrip(random_model, tmp_path, rng):
    random_model.actnorms(ETA)[0].initialized = True
    extras = [rng.normal(size=(2, 3)), rng.normal(size=5)]
    path = save_checkpoint(random_model, tmp_path / "model.ckpt", train_state={"phase": "ml", "epoch": 3},
                           extra_arrays=extras)

    loaded, state, loaded_extras = load_checkpoint(path, expected=random_model.architecture)
    for original, restored in zip(random_model.parameters(), loaded.parameters()):
        assert np.array_equal(original.value, restored.value)
    assert state == {"phase": "ml", "epoch": 3}
    assert all(np.array_equal(a, b) for a, b in zip(extras, loaded_extras))
    assert [a.initialized for a in loaded.actnorms()] == [a.initialized for a in random_model.actnorms()]
    z = rng.normal(size=(3, 2))
    assert np.array_equal(loaded.sample(Y, z), random_model.sample(Y, z))


def test_identity_setting_survives_a_checkpoint(identity_model, tmp_path):
    path = save_checkpoint(identity_model, tmp_path / "identity.ckpt")
    loaded, _, _ = load_checkpoint(path)
    for lu in loaded.lu_linears():
        assert np.array_equal(lu.perm, np.eye(lu.dim))
        assert np.array_equal(lu.sign_s, np.ones(lu.dim))
    assert_allclose(loaded.sample(Y, np.array([0.7, -1.3])), [0.7, -1.3, 0.0, 0.0])


def test_fixed_permutations_are_stored_not_rebuilt(random_model, tmp_path):
    lu = random_model.lu_linears()[0]
    lu.perm = lu.perm[:, ::-1].copy()
    lu.sign_s = -lu.sign_s
    loaded, _, _ = load_checkpoint(save_checkpoint(random_model, tmp_path / "model.ckpt"))
    assert np.array_equal(loaded.lu_linears()[0].perm, lu.perm)
    assert np.array_equal(loaded.lu_linears()[0].sign_s, lu.sign_s)


def test_checkpoint_header_is_readable(random_model, tmp_path):
    path = save_checkpoint(random_model, tmp_path / "model.ckpt")
    assert path.read_bytes().startswith(b"TRUMPETFLOW-CHECKPOINT\n")
    header, offset = read_checkpoint_header(path)
    assert header["architecture"] == random_model.architecture.to_dict()
    assert header["train_state"] is None
    assert offset > 0


def test_checkpoint_architecture_mismatch(random_model, tmp_path, tiny_arch):
    path = save_checkpoint(random_model, tmp_path / "model.ckpt")
    other = Architecture(**dict(tiny_arch.to_dict(), h_blocks=3))
    with pytest.raises(ArchitectureMismatchError, match="expected") as info:
        load_checkpoint(path, expected=other)
    assert '"h_blocks": 3' in str(info.value)
    assert '"h_blocks": 2' in str(info.value)


def test_corrupt_checkpoints_are_rejected(random_model, tmp_path):
    path = save_checkpoint(random_model, tmp_path / "model.ckpt")
    data = path.read_bytes()

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(data[:-12])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)

    short = tmp_path / "short.ckpt"
    short.write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="float64 values"):
        load_checkpoint(short)

    foreign = tmp_path / "foreign.ckpt"
    foreign.write_bytes(b"NOT-A-CHECKPOINT\n{}\n")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(foreign)
