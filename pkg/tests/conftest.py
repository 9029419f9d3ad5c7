import numpy as np
import pytest
import torch

from vlgkit.seqcore import (
    ImageSegment,
    InterleavedSequence,
    ModelConfig,
    PatchGrid,
    TextSegment,
)


@pytest.fixture(scope="session")
def toy_config() -> ModelConfig:
    return ModelConfig(seed=1)


@pytest.fixture(scope="session")
def small_config() -> ModelConfig:
    """Cheaper config for gradient checks and CLI round-trips."""
    return ModelConfig(d_model=32, n_heads=4, patch_channels=8, grid_height=3,
                       grid_width=3, lora_rank=4, lora_alpha=8.0, vocab_size=32,
                       max_seq_len=128, seed=2)


def random_grid(rng: np.random.Generator, config: ModelConfig) -> PatchGrid:
    data = rng.normal(0, 0.5, size=(config.n_patches, config.patch_channels))
    return PatchGrid(config.grid_height, config.grid_width,
                     config.patch_channels, data)


def random_sequence(rng: np.random.Generator, config: ModelConfig,
                    max_segments: int = 4) -> InterleavedSequence:
    """Random non-empty interleaved sequence valid under config."""
    segments = []
    for _ in range(int(rng.integers(1, max_segments + 1))):
        if rng.random() < 0.5:
            tokens = tuple(int(t) for t in
                           rng.integers(4, config.vocab_size, size=rng.integers(1, 6)))
            segments.append(TextSegment(tokens))
        else:
            segments.append(ImageSegment(random_grid(rng, config)))
    return InterleavedSequence(tuple(segments))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class _JudgeHandler(BaseHTTPRequestHandler):
    """Stub judge endpoint: POST {"prompt": str} -> {"text": str}.

    Behaviour is keyed off markers embedded in the prompt text so tests can
    exercise every response shape.
    """

    def do_POST(self):  # noqa: N802 - http.server API
        length = int(self.headers.get("Content-Length", 0))
        prompt = json.loads(self.rfile.read(length))["prompt"]
        if "SERVER_ERROR" in prompt:
            self.send_response(500)
            self.end_headers()
            return
        if prompt.startswith("Imagine you are an expert data annotator"):
            if "NONSENSE" in prompt:
                text = "maybe"
            elif "BADTEXT" in prompt:
                text = "0"
            else:
                text = "1"
        else:
            text = "" if "NO_ANNOTATION" in prompt else "Recreate the material."
        payload = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture(scope="session")
def judge_endpoint():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _JudgeHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/"
    server.shutdown()
