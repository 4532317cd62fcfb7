import numpy as np
import pytest
import torch

from srdistill.data_prep import build_manifest, save_dataset
from srdistill.toy import make_toy_corpus

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus():
    return make_toy_corpus(4, 48, seed=0)


@pytest.fixture
def toy_manifest(toy_corpus, tmp_path):
    m = build_manifest(toy_corpus, "toy", scale=2, size=32, stride=16)
    save_dataset(m, tmp_path / "toy")
    return m


@pytest.fixture(scope="session")
def toy_testset():
    return make_toy_corpus(2, 40, seed=99)


# Desk-scale experiment shared by the acceptance suite and the grid-ordering test.
# 8 training images, 2 held-out test images, shrunk schedules; about 25 min on one core.

DESK_DISTILL = {"iterations": 1000, "synth_size": 48, "batch_real": 4, "patch_size": 32,
                "snapshot_every": 250}
DESK_LATENT = {"iterations": 1000, "latent_dim": 64, "out_size": 64, "latent_lr": 1e-3,
               "batch_real": 4, "patch_size": 32, "inversion_steps": 300, "tune_steps": 100,
               "ae_pretrain_steps": 400, "reference": "pretrained", "snapshot_every": 250}
DESK_TRAIN = {"steps": 2000, "batch_size": 16, "learning_rate": 1e-4, "optimizer": "adam"}


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    import time
    from types import SimpleNamespace

    from srdistill.data_prep import prepare
    from srdistill.eval_harness import ExperimentSpec, VariantBuilder, run_grid
    from srdistill.toy import write_toy_corpus

    root = tmp_path_factory.mktemp("desk")
    write_toy_corpus(root / "train", count=8, size=96, seed=0)
    write_toy_corpus(root / "test", count=2, size=96, seed=1)
    prepare(root / "train", root / "prep", scale=2, size=48, stride=24, corpus_name="desk")
    common = dict(source=str(root / "prep"), testsets={"desk": str(root / "test")}, seed=0,
                  patch_size=32, distill=DESK_DISTILL, latent=DESK_LATENT, reference_steps=2000)
    spec2 = ExperimentSpec(
        variants=["original", "downscaled_baseline", "inversion_baseline", "syn_pixel_noise",
                  "syn_pixel_downscale", "syn_latent"],
        architectures=["srcnn"], train_scale=2, distill_scale=2, train=DESK_TRAIN,
        train_repeats=3, **common)
    spec4 = ExperimentSpec(
        variants=["original", "downscaled_baseline", "inversion_baseline", "syn_pixel_downscale",
                  "syn_latent"],
        architectures=["srcnn"], train_scale=4, distill_scale=2,
        train={**DESK_TRAIN, "steps": 1000}, **common)
    builder = VariantBuilder(spec2, root / "work")
    t0 = time.perf_counter()
    report2 = run_grid(spec2, builder=builder)
    t2 = time.perf_counter() - t0
    built_before = set(builder.runtimes)
    report4 = run_grid(spec4, builder=builder)
    t4 = time.perf_counter() - t0 - t2
    report2.write(root / "report")
    report4.write(root / "report")
    return SimpleNamespace(root=root, report2=report2, report4=report4, builder=builder,
                           built_in_4x=set(builder.runtimes) - built_before,
                           seconds_2x=t2, seconds_4x=t4)


# One PASS/FAIL line per acceptance criterion, printed at the end of the run.

def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        num, _, title = name.partition("_")
        detail = dict(report.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        status = "PASS" if report.passed else "FAIL"
        _CRITERIA[int(num)] = f"{status}  criterion {int(num):2d} {title.replace('_', ' ')}: {detail}"


_CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the current criterion's summary line."""
    def note(text):
        request.node.user_properties.append(("detail", text))
        print(text)
    return note
