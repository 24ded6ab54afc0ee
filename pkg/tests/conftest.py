import json

import pytest

# a model small enough that a few optimisation steps take well under a second
TINY_MODEL = {"image_size": 16, "base_channels": 4, "max_channels": 8, "res_blocks": 1,
              "attention_scales": [8], "patch_sizes": [3]}


def tiny_config(command, steps=2, **extra):
    cfg = {"command": command, "seed": 0,
           "model": dict(TINY_MODEL),
           "task": {"kind": "translation", "size": 16},
           "extractor": {"channels": [4, 8]},
           "schedule": {"steps": steps, "log_every": 1, "sample_every": 1}}
    if command == "train-anim":
        cfg["task"] = {"kind": "clip", "size": 16, "frames": 2}
    if command == "train-men":
        cfg["task"] = {"kind": "skeleton", "sequence_length": 16}
        cfg["men"] = {"hidden": 8}
        cfg["schedule"]["eval_sequences"] = 2
        cfg["optim"] = {"batch_size": 2}
    for key, val in extra.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    return cfg


@pytest.fixture
def write_config(tmp_path):
    def write(command, name="cfg.json", **kw):
        path = tmp_path / name
        path.write_text(json.dumps(tiny_config(command, **kw)))
        return path
    return write


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list = []


def record(criterion: int, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
