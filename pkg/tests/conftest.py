import numpy as np
import pytest

from rbfcnn import datasets as D
from rbfcnn.classifier import CnnConfig, ModelParams, Pipeline
from rbfcnn.rbf import em_fit, image_patches
from rbfcnn.reconstruction import ReconstructionConfig

MNIST_SHUFFLE_SEED = 20240611


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The 5,000-image MNIST sample bundled with mlxtend, shuffled and written as IDX files."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    x, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(MNIST_SHUFFLE_SEED).permutation(len(y))
    ds = D.Dataset(x[order].reshape(-1, 28, 28, 1) / 255.0, y[order], "mnist")
    root = tmp_path_factory.mktemp("mnist")
    D.write_mnist_idx(ds, root / "images-idx3-ubyte", root / "labels-idx1-ubyte")
    return root


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return D.load_mnist_idx(mnist_dir / "images-idx3-ubyte", mnist_dir / "labels-idx1-ubyte")


@pytest.fixture(scope="session")
def blobs():
    return D.synthetic_blobs(120, 2, image_size=10, seed=3)


@pytest.fixture(scope="session")
def small_bank(blobs):
    return em_fit(image_patches(blobs.images[:30], 3), threshold=-3.0, patch_size=3, seed=0)


@pytest.fixture(scope="session")
def small_cnn_cfg():
    return CnnConfig(input_shape=(10, 10, 1), n_classes=2, conv_channels=(3, 4))


@pytest.fixture
def small_pipeline(small_bank, small_cnn_cfg):
    params = ModelParams.init(small_cnn_cfg, seed=1)
    return Pipeline(params, small_cnn_cfg, small_bank, ReconstructionConfig(beta2=0.0, m=1))
