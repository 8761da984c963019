# Copyright 2026 The gbmdebug Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Prototype-based gray-box image classifiers with memory-backed debugging.

Thin wrapper over the compiled ``_gbmdebug`` module: configs, feedback and
results are plain dicts.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Optional

from . import _gbmdebug
from ._gbmdebug import (
    DimensionError,
    Error,
    FormatError,
    GenerationError,
    NumericError,
    ProfileError,
    StateError,
    ValidationError,
    kappa_param,
)

__all__ = [
    "DimensionError",
    "Error",
    "FormatError",
    "GenerationError",
    "NumericError",
    "ProfileError",
    "Service",
    "Session",
    "StateError",
    "ValidationError",
    "checkpoint_hash",
    "default_data_config",
    "default_experiment_config",
    "default_session_config",
    "generate_dataset",
    "kappa_param",
    "load_manifest",
    "report",
    "run_experiment",
]

__version__ = "0.1.0"


def _opt(path: Optional[Any]) -> Optional[str]:
    return None if path is None else str(path)


def default_data_config() -> dict:
    return json.loads(_gbmdebug.default_data_config())


def default_session_config() -> dict:
    return json.loads(_gbmdebug.default_session_config())


def default_experiment_config() -> dict:
    return json.loads(_gbmdebug.default_experiment_config())


def generate_dataset(out: Any, config: Optional[dict] = None, **overrides: Any) -> dict:
    """Writes a confounded-shapes dataset to ``out`` and returns its manifest."""
    cfg = default_data_config() if config is None else dict(config)
    cfg.update(overrides)
    return json.loads(_gbmdebug.generate_dataset(json.dumps(cfg), str(out)))


def load_manifest(path: Any) -> dict:
    return json.loads(_gbmdebug.dataset_manifest(str(path)))


def run_experiment(config: Optional[dict] = None, data_dir: Any = None, out: Any = None) -> dict:
    """Initial round, scripted feedback and one refinement round."""
    cfg = default_experiment_config() if config is None else config
    return json.loads(_gbmdebug.run_experiment(json.dumps(cfg), _opt(data_dir), _opt(out)))


def report(runs: Iterable[Any], report_dir: Any = ".") -> str:
    return _gbmdebug.report([str(r) for r in runs], str(report_dir))


def checkpoint_hash(path: Any) -> str:
    return _gbmdebug.checkpoint_hash(str(path))


class Session:
    """One model under debugging: train, assess, give feedback, refine."""

    def __init__(self, id: str = "session", config: Optional[dict] = None, data_dir: Any = None, *, _impl=None):
        if _impl is not None:
            self._s = _impl
            return
        cfg = default_session_config() if config is None else config
        self._s = _gbmdebug.Session(id, json.dumps(cfg), _opt(data_dir))

    @classmethod
    def load(cls, path: Any) -> "Session":
        return cls(_impl=_gbmdebug.Session.load(str(path)))

    @classmethod
    def replay(cls, path: Any) -> "Session":
        return cls(_impl=_gbmdebug.Session.replay(str(path)))

    id = property(lambda self: self._s.id)
    state = property(lambda self: self._s.state)
    round = property(lambda self: self._s.round)
    memory_size = property(lambda self: self._s.memory_size)
    checkpoint_hash = property(lambda self: self._s.checkpoint_hash)
    prototypes = property(lambda self: self._s.prototypes)
    weights = property(lambda self: self._s.weights)
    owner = property(lambda self: self._s.owner)

    @property
    def config(self) -> dict:
        return json.loads(self._s.config_json())

    def attach(self, path: Any) -> None:
        self._s.attach(str(path))

    def save(self) -> None:
        self._s.save()

    def run_round(self) -> None:
        self._s.run_round()

    def set_loss(self, spec: dict) -> None:
        self._s.set_loss(json.dumps(spec))

    def assess(self, n: int = 0, images: bool = False) -> list:
        return json.loads(self._s.assess(n, images))

    def submit_feedback(self, feedback: dict) -> None:
        self._s.submit_feedback(json.dumps(feedback))

    def feedback_log(self) -> list:
        return json.loads(self._s.feedback_log())

    def metrics(self) -> list:
        return json.loads(self._s.metrics())

    def explain(self, image: int, label: Optional[int] = None) -> dict:
        return json.loads(self._s.explain(image, label))

    def oracle(self, theta: float = 0.5, scope: str = "class") -> list:
        return json.loads(self._s.oracle(theta, scope))


class Service:
    """HTTP service on a background thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, data_root: Any = ".", session_root: Any = ""):
        self._svc = _gbmdebug.Service(host, port, str(data_root), str(session_root))

    def start(self) -> int:
        return self._svc.start()

    def stop(self) -> None:
        self._svc.stop()

    def wait_idle(self) -> None:
        self._svc.wait_idle()

    @property
    def port(self) -> int:
        return self._svc.port

    def __enter__(self) -> "Service":
        self.start()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.stop()
