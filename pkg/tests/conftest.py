"""Shared trained-pipeline fixtures for the acceptance and trained-model tests.

The pipeline mirrors the command line defaults: three synthetic subjects,
a fusion shape over s0, s1 and every 6th training frame of s2, a surface
field trained on s0 and s1, and s2 added either by fine-tuning or by full
joint training. Building it takes roughly ten minutes on one core.

Set ``NSF_TEST_CACHE`` to a directory to keep the built stages between
sessions (handy while iterating; pickles are reused when present).
"""
import copy
import os
import pickle
from functools import cached_property

import pytest

from nsf.cli import DEFAULT_CONFIG
from nsf.fusion import FusionShape
from nsf.surface_field import NeuralSurfaceField, SubjectRig
from nsf.synth import default_subject_specs, load_dataset, write_dataset
from nsf.train import (Stopwatch, TrainConfig, attach_projection, finetune_subject, pooled_canonical,
                       prepare_batches, train_nsf)

SEED = 0
CRITERIA = {}


class Pipeline:
    def __init__(self, root, cache=None):
        self.root = root
        self.cache = cache
        self.cfg = copy.deepcopy(DEFAULT_CONFIG)

    def _stage(self, name, build):
        if self.cache is None:
            return build()
        path = os.path.join(self.cache, name + ".pkl")
        if os.path.exists(path):
            with open(path, "rb") as fh:
                return pickle.load(fh)
        out = build()
        with open(path, "wb") as fh:
            pickle.dump(out, fh)
        return out

    @cached_property
    def dataset(self):
        data = os.path.join(self.cache or self.root, "data")
        if not os.path.exists(os.path.join(data, "manifest.json")):
            s = self.cfg["synth"]
            write_dataset(data, default_subject_specs(), n_train=s["n_train"], n_heldout=s["n_heldout"],
                          n_keys=s["n_keys"], jitter=s["jitter"], seed=SEED)
        return load_dataset(data)

    def rigs(self, subjects):
        return {s: SubjectRig(self.dataset.subjects[s].skeleton, self.dataset.subjects[s].skinning)
                for s in subjects}

    @property
    def finetune_frames(self):
        return self.dataset.train_frames[::self.cfg["finetune"]["frame_stride"]]

    def _batches(self, subject, frames):
        return prepare_batches(self.dataset, [subject], frames, self.cfg["canon"]["points_per_frame"], SEED)

    @cached_property
    def raw_batches(self):
        def build():
            tr = self.dataset.train_frames
            return {"s0": self._batches("s0", tr), "s1": self._batches("s1", tr), "s2": self._batches("s2", tr)}
        return self._stage("batches", build)

    @cached_property
    def fusion(self):
        def build():
            ft = set(self.finetune_frames)
            b = self.raw_batches
            pool = b["s0"] + b["s1"] + [x for x in b["s2"] if x.frame in ft]
            f = self.cfg["fusion"]
            return FusionShape(hidden=tuple(f["hidden"]), n_steps=f["n_steps"], sphere_steps=f["sphere_steps"],
                               lambda_eik=f["lambda_eik"], lambda_normal=f["lambda_normal"], seed=SEED,
                               log_every=0).fit(pooled_canonical(pool))
        return self._stage("fusion", build)

    @cached_property
    def batches(self):
        return {s: attach_projection(b, self.fusion) for s, b in self.raw_batches.items()}

    def train_config(self, **kw):
        return TrainConfig.from_dict({"seed": SEED, "log_every": 0, **self.cfg["train"], **kw})

    def new_model(self, subjects):
        return NeuralSurfaceField(**self.cfg["nsf"], seed=SEED).initialize(self.fusion, self.rigs(subjects))

    @cached_property
    def multi(self):
        """Surface field trained jointly on s0 and s1."""
        def build():
            m = self.new_model(["s0", "s1"])
            train_nsf(m, self.batches["s0"] + self.batches["s1"], self.train_config())
            return m
        return self._stage("multi", build)

    @cached_property
    def single(self):
        """Ablation: a field trained on s1 alone with the same step budget."""
        def build():
            m = self.new_model(["s1"])
            train_nsf(m, self.batches["s1"], self.train_config(epochs=2 * self.cfg["train"]["epochs"]))
            return m
        return self._stage("single", build)

    @cached_property
    def finetuned(self):
        """(model, seconds): s2 fitted on 10 frames against the frozen decoder."""
        def build():
            m = copy.deepcopy(self.multi)
            m.add_subject("s2", self.rigs(["s2"])["s2"])
            ft = set(self.finetune_frames)
            with Stopwatch() as sw:
                finetune_subject(m, "s2", [b for b in self.batches["s2"] if b.frame in ft], self.train_config(),
                                 epochs=self.cfg["finetune"]["epochs"])
            return m, sw.elapsed
        return self._stage("finetuned", build)

    @cached_property
    def full(self):
        """(model, seconds): s0, s1 and s2 trained jointly from scratch on all frames."""
        def build():
            m = self.new_model(["s0", "s1", "s2"])
            with Stopwatch() as sw:
                train_nsf(m, self.batches["s0"] + self.batches["s1"] + self.batches["s2"], self.train_config())
            return m, sw.elapsed
        return self._stage("full", build)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    cache = os.environ.get("NSF_TEST_CACHE")
    if cache:
        os.makedirs(cache, exist_ok=True)
    return Pipeline(str(tmp_path_factory.mktemp("pipeline")), cache)


@pytest.fixture
def criterion(request):
    """Record the measured values for one acceptance criterion."""
    def note(text):
        request.node.user_properties.append(("measured", text))
    return note


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n, title = props["criterion"]
    entry = CRITERIA.setdefault(n, {"title": title, "status": "PASS", "measured": []})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if report.when == "call":
        entry["measured"] += [v for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        extra = f" ({'; '.join(e['measured'])})" if e["measured"] else ""
        terminalreporter.write_line(f"{e['status']} criterion {n}: {e['title']}{extra}")
