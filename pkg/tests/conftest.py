import pytest

from interactive_scene.config import PipelineConfig
from interactive_scene.pipeline import run_pipeline
from interactive_scene.synthetic import build_demo_db, demo_spec, generate_synthetic_scene, write_scene


@pytest.fixture(scope="session")
def demo_db():
    return build_demo_db()


@pytest.fixture(scope="session")
def db_dir(tmp_path_factory, demo_db):
    root = tmp_path_factory.mktemp("cad_db")
    demo_db.save(root)
    return root


def _write_corpus_scene(tmp_path_factory, db, name, seed, occlusion=0.0, size_noise=0.0):
    spec = demo_spec()
    spec.occlusion = occlusion
    spec.size_noise = size_noise
    scene = generate_synthetic_scene(spec, db, seed)
    root = tmp_path_factory.mktemp(name)
    write_scene(scene, root)
    return root, scene


@pytest.fixture(scope="session")
def corpus(tmp_path_factory, demo_db, db_dir):
    """Scenes run end to end once per session: name -> (scene dir, synthetic scene, out dir, result)."""
    runs = {}
    for name, seed, occ, noise in [("clean", 0, 0.0, 0.0), ("noisy", 3, 0.3, 0.02)]:
        scene_dir, scene = _write_corpus_scene(tmp_path_factory, demo_db, name, seed, occ, noise)
        out = tmp_path_factory.mktemp(f"{name}_out")
        result = run_pipeline(PipelineConfig(scene=str(scene_dir), cad_db=str(db_dir), out=str(out), seed=7))
        runs[name] = (scene_dir, scene, out, result)
    return runs


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
