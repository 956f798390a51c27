import numpy as np
import pytest

from fedmeta.data import Federation, NodeData, SizeSpec, split_sources_targets
from fedmeta.model import LossSpec, Params, Sample


def random_params(C, F, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    return Params(rng.normal(0, scale, C * F + C), C, F)


def random_batch(C, F, n, seed):
    rng = np.random.default_rng(seed)
    return [Sample(rng.normal(size=F), int(rng.integers(C))) for _ in range(n)]


def make_node(C, F, n_train, n_test, seed, node_id=0):
    rng = np.random.default_rng(seed)
    mk = lambda n: [Sample(rng.normal(size=F), int(rng.integers(C))) for _ in range(n)]
    return NodeData(node_id=node_id, train=mk(n_train), test=mk(n_test))


def make_federation(C, F, n_nodes, seed, n_train=5, n_test=8, n_targets=1):
    """Small random federation with learnable labels from a shared model."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(C, F))
    b = rng.normal(size=C)
    chunks = []
    for _ in range(n_nodes):
        X = rng.normal(size=(n_train + n_test, F))
        y = np.argmax(X @ W.T + b, axis=1)
        chunks.append([Sample(x, int(c)) for x, c in zip(X, y)])
    frac = 1 - n_targets / n_nodes
    return split_sources_targets(chunks, frac, n_train, seed, num_classes=C)


@pytest.fixture(scope="session")
def spec():
    return LossSpec(reg_coeff=0.01)


@pytest.fixture(scope="session")
def digits_corpus():
    """Desk-scale MNIST stand-in based on scikit-learn's bundled digits.

    8x8 glyphs are upsampled to 24x24 and placed on a 28x28 canvas; each
    base image later receives per-node placement and noise, emulating
    heterogeneous edge sensors. Raw (uint8 images, labels) are returned so
    tests can also exercise the IDX path.
    """
    sk = pytest.importorskip("sklearn.datasets")
    digits = sk.load_digits()
    images = (digits.images / 16.0 * 255).astype(np.uint8)  # (n, 8, 8)
    return images, digits.target.astype(np.uint8)


def render_digit(img8, dy, dx, rng, noise=0.15):
    """Place an 8x8 digit (as float [0,1]) on a 28x28 canvas at offset (dy, dx)
    in [-4, 4], with pixel noise; returns the flat 784 feature vector."""
    big = np.repeat(np.repeat(img8, 3, axis=0), 3, axis=1)  # 24x24
    canvas = np.zeros((36, 36))
    canvas[6 + dy : 6 + dy + 24, 6 + dx : 6 + dx + 24] = big
    canvas = canvas[4:32, 4:32]
    canvas = canvas + rng.normal(0, noise, (28, 28))
    return np.clip(canvas, 0, 1).ravel()


def build_desk_mnist(images_u8, labels, num_nodes=100, k=5, seed=5, variants=2):
    """Partition base digits into 2-class nodes and expand each node with
    noisy per-node-offset renderings (fixed sensor alignment per node)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD16]))
    all_labels = sorted(set(int(v) for v in labels))
    pools = {
        d: list(rng.permutation(np.where(labels == d)[0])) for d in all_labels
    }
    base_sizes = np.clip(
        np.floor(12.0 + 6.0 * rng.pareto(3.5, num_nodes)), 11, 22
    ).astype(int)
    pairs = []
    while len(pairs) < num_nodes:
        perm = [all_labels[i] for i in rng.permutation(len(all_labels))]
        pairs.extend((perm[2 * j], perm[2 * j + 1]) for j in range(len(all_labels) // 2))

    chunks = []
    for i in range(num_nodes):
        d1, d2 = pairs[i]
        ndy, ndx = rng.integers(-3, 4, 2)
        s = int(base_sizes[i])
        take1 = s // 2
        idx = [pools[d1].pop() for _ in range(take1)]
        idx += [pools[d2].pop() for _ in range(s - take1)]
        samples = []
        for j in idx:
            img = images_u8[j].astype(np.float64) / 255.0
            for _ in range(variants):
                dy = int(np.clip(ndy + rng.integers(-1, 2), -4, 4))
                dx = int(np.clip(ndx + rng.integers(-1, 2), -4, 4))
                samples.append(Sample(render_digit(img, dy, dx, rng), int(labels[j])))
        chunks.append(samples)
    return split_sources_targets(chunks, 0.8, k, seed, num_classes=10)


@pytest.fixture(scope="session")
def desk_mnist(digits_corpus):
    images, labels = digits_corpus
    return build_desk_mnist(images, labels)
