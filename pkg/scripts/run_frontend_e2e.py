#!/usr/bin/env python3
"""Frontend end-to-end gate: build the UI, start the service, run the
scripted-session vitest against a live server, compare with the headless
fixture, and shut everything down.

Usage: python scripts/run_frontend_e2e.py --ckpt runs/toy/run/ckpt.pt --data runs/toy/data
"""

import argparse
import os
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", type=Path, required=True)
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--budget", type=int, default=5)
    ap.add_argument("--fixture", type=Path, default=ROOT / "frontend" / "test" / "fixture_e2e.json")
    args = ap.parse_args()

    frontend = ROOT / "frontend"
    if not (frontend / "node_modules").exists():
        subprocess.run(["npm", "install", "--no-audit", "--no-fund"], cwd=frontend, check=True)
    subprocess.run(["npx", "tsc", "-p", "tsconfig.json"], cwd=frontend, check=True)
    subprocess.run(
        [sys.executable, str(ROOT / "scripts" / "make_e2e_fixture.py"),
         "--ckpt", str(args.ckpt), "--data", str(args.data),
         "--out", str(args.fixture), "--budget", str(args.budget)],
        check=True,
    )

    from kprism.data import DatasetManifest
    from kprism.service import create_app
    from kprism.training import load_checkpoint

    import uvicorn

    model, _, _ = load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    app = create_app(model, manifest=manifest, ui_dir=frontend)
    port = free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 30
    while not server.started:
        if time.time() > deadline:
            print("server failed to start", file=sys.stderr)
            return 2
        time.sleep(0.1)

    env = dict(os.environ)
    env["KPRISM_SERVER"] = f"http://127.0.0.1:{port}"
    env["KPRISM_E2E_FIXTURE"] = str(args.fixture)
    result = subprocess.run(
        ["npx", "vitest", "run", "test/e2e.test.ts"], cwd=frontend, env=env
    )
    server.should_exit = True
    thread.join(timeout=10)
    print("E2E", "PASS" if result.returncode == 0 else "FAIL")
    return result.returncode


if __name__ == "__main__":
    sys.exit(main())
