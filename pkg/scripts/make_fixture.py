#!/usr/bin/env python3
"""Regenerate the committed tiny random-weights model fixture.

The fixture is byte-deterministic: rerunning this script must reproduce
tests/fixtures/tiny_random.hecnn exactly.
"""

from pathlib import Path

from hecnn.model import random_model, save_model

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "tiny_random.hecnn"


def main() -> None:
    model = random_model(
        input_dims=(12, 12), filters=3, kernel=(3, 3), classes=4, seed=1234
    )
    FIXTURE.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, FIXTURE)
    print(f"wrote {FIXTURE} ({FIXTURE.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
