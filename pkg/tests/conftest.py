import numpy as np
import pytest

from photoba.imaging import GrayImage, PyramidAtlas, build_pyramid
from photoba.scene import plane_from_point_normal, project_world
from photoba.synthetic import SceneSpec, generate_synthetic_scene, write_synthetic_scene


def atlas_of(images):
    return PyramidAtlas([build_pyramid(GrayImage(im)) for im in images])


def initial_state(scene):
    """Perturbed cameras carrying landmarks built from the perturbed points."""
    init, truth = scene.initial, scene.truth
    src = truth.sources
    uv, _ = project_world(init, src, scene.initial_points)
    planes = [plane_from_point_normal(init.R[i], init.t[i], x, n)
              for i, x, n in zip(src, scene.initial_points, scene.normals)]
    vis = [truth.visibility(k) for k in range(truth.n_landmarks)]
    return init.with_landmarks(uv, src, planes, vis)


@pytest.fixture(scope="session")
def small_scene():
    """Four rendered views of the default surfaces, no relighting."""
    spec = SceneSpec(n_images=4, n_landmarks=150, arc_degrees=20.0, relight=False)
    return generate_synthetic_scene(3, spec)


@pytest.fixture(scope="session")
def small_atlas(small_scene):
    return atlas_of(small_scene.images)


@pytest.fixture(scope="session")
def small_initial(small_scene):
    return initial_state(small_scene)


@pytest.fixture(scope="session")
def default_scene():
    return generate_synthetic_scene(0)


@pytest.fixture(scope="session")
def default_scene_dir(default_scene, tmp_path_factory):
    return write_synthetic_scene(default_scene, tmp_path_factory.mktemp("synth") / "scene")


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A quick scene for pipeline and CLI plumbing tests."""
    spec = SceneSpec(n_images=4, width=160, height=120, focal=130.0, n_landmarks=60,
                     arc_degrees=20.0)
    sc = generate_synthetic_scene(5, spec)
    return write_synthetic_scene(sc, tmp_path_factory.mktemp("tiny") / "scene")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
