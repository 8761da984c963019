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

import pytest

import gbmdebug


def small_config(seed=0, epochs=2):
    cfg = gbmdebug.default_session_config()
    cfg["data"].update({"seed": seed, "n_train": 4, "n_test": 2})
    cfg["schedule"].update(
        {"seed": seed, "initial_epochs": epochs, "refine_epochs": 2, "phase_length": 1, "batch_size": 8}
    )
    return cfg


@pytest.fixture
def session_config():
    return small_config()
