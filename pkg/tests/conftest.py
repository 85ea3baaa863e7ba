import numpy as np
import pytest
from scipy import ndimage

from fetoreg.imagecore import BinaryMask, ScalarImage
from fetoreg.synth import SynthConfig, generate_scene
from fetoreg.warp import AffineTransform, compose, default_visibility, warp_image


def smooth_random_image(rng, h, w, sigma=2.0):
    """Band-limited noise rescaled to [0.05, 0.95]."""
    x = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
    x = (x - x.min()) / (x.max() - x.min())
    return ScalarImage(0.05 + 0.9 * x)


def random_affine(rng, size, max_t=15.0, max_rot=3.0, scale_range=(0.97, 1.03)):
    """Random similarity-plus-translation about the frame centre."""
    c = (size - 1) / 2.0
    s = rng.uniform(*scale_range)
    rot = AffineTransform.rotation(rng.uniform(-max_rot, max_rot), c, c)
    zoom = compose(AffineTransform.translation(c, c),
                   compose(AffineTransform.scaling(s), AffineTransform.translation(-c, -c)))
    shift = AffineTransform.translation(*rng.uniform(-max_t, max_t, 2))
    return compose(shift, compose(rot, zoom))


def scene_pair(scene, truth, size, rng=None, noise=0.0, origin=(288.0, 288.0)):
    """Fixed and moving views of ``scene`` where ``truth`` maps moving to fixed."""
    full = BinaryMask.full(scene.width, scene.height)
    pose = AffineTransform.translation(*origin)
    vis = default_visibility(size, size)
    out = []
    for t in (pose, compose(pose, truth)):
        img = warp_image(scene, full, t, size, size).image.data.copy()
        if noise:
            img += noise * rng.standard_normal(img.shape)
        img[~vis.data] = 0.0
        out.append((ScalarImage.clipped(img), vis))
    return out[0], out[1]


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SynthConfig(seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
