import numpy as np
import pytest

from qsense import tensor as T
from qsense.data import make_blob_split, make_noise, golden_set
from qsense.generation import GenConfig, generate
from qsense.network import TrainConfig, build_mlp, build_tiny_cnn, train
from qsense.pipeline import DESK
from qsense.quantization import calibrate
from qsense.tensor import Tape, Tensor


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      abs_tol: float = 1e-6, rel_tol: float = 1e-4):
    gap = np.abs(analytic - numeric)
    bound = np.maximum(abs_tol, rel_tol * np.abs(numeric))
    assert np.all(gap <= bound), f"gradient mismatch: max gap {gap.max()}, bound {bound.min()}"


def weighted_sum_loss(tape: Tape, out: Tensor, weights: np.ndarray) -> Tensor:
    """Deterministic scalar readout for gradcheck: sum(out * weights)."""
    return T.sum_all(tape, T.mul(tape, out, Tensor(weights)))


@pytest.fixture(scope="session")
def desk():
    """The trained desk-scale setup shared by the heavier tests."""
    task = DESK["task_seed"]
    train_ds = make_blob_split(task, DESK["train_seed"], DESK["train_per_class"], DESK["num_classes"])
    eval_ds = make_blob_split(task, DESK["eval_seed"], DESK["eval_per_class"], DESK["num_classes"])
    calib_ds = make_blob_split(task, DESK["calib_seed"], DESK["calib_per_class"], DESK["num_classes"])
    noise_ds = make_noise(DESK["noise_seed"], DESK["noise_count"], num_classes=DESK["num_classes"])
    mlp_cfg = DESK["arch_train"]["mlp"]
    cnn_cfg = DESK["arch_train"]["tiny_cnn"]
    mlp = train(build_mlp(seed=3), train_ds,
                TrainConfig(epochs=mlp_cfg["epochs"], learning_rate=mlp_cfg["learning_rate"],
                            batch_size=mlp_cfg["batch_size"], seed=mlp_cfg["seed"]))
    cnn = train(build_tiny_cnn(seed=3), train_ds,
                TrainConfig(epochs=cnn_cfg["epochs"], learning_rate=cnn_cfg["learning_rate"],
                            batch_size=cnn_cfg["batch_size"], seed=cnn_cfg["seed"]))
    gen_cfg = GenConfig(iterations=DESK["gen_iterations"], seed=DESK["gen_seed"], lam=DESK["gen_lam"])
    golden = golden_set(DESK["num_classes"])
    gen_mlp = generate(mlp, golden, gen_cfg)
    gen_cnn = generate(cnn, golden, gen_cfg)
    return {
        "train": train_ds, "eval": eval_ds, "calib": calib_ds, "noise": noise_ds,
        "mlp": mlp, "cnn": cnn, "gen_mlp": gen_mlp, "gen_cnn": gen_cnn,
        "profile_mlp": calibrate(mlp, calib_ds), "profile_cnn": calibrate(cnn, calib_ds),
    }
