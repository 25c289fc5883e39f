"""Client for OpenAI-compatible chat-completion and embedding endpoints.

Generation requests carry the fixed inference settings (temperature 0,
256 max output tokens by default).  Batch generation fans out with bounded
concurrency but always writes results in input order, skips pairs already
present in the output file on resume, and records per-pair failures instead
of aborting.  Embedding calls deduplicate texts and cache vectors in the
node-embedding file format keyed by text hash, so a completed embedding run
issues no further requests.

All transport goes through httpx; tests inject ``httpx.MockTransport`` so
nothing here ever touches a real endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .curation import PromptSample
from .retrieval import read_embedding_file, write_embedding_file

log = logging.getLogger(__name__)

RETRY_CAP = 5
BACKOFF_BASE_SECONDS = 0.5


class GatewayError(RuntimeError):
    """Endpoint misconfiguration, exhausted retries, or malformed replies."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    embed_model: str | None = None
    auth_env: str | None = None
    system_message: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    max_concurrency: int = 4
    embed_batch_size: int = 256

    def validate(self) -> None:
        if not self.base_url:
            raise GatewayError("endpoint base URL is empty")
        if not self.model:
            raise GatewayError("model name is empty")
        if not 0 <= self.max_retries <= RETRY_CAP:
            raise GatewayError(f"max_retries must be in [0, {RETRY_CAP}]")
        if self.max_concurrency < 1:
            raise GatewayError("max_concurrency must be >= 1")
        if self.timeout <= 0:
            raise GatewayError("timeout must be positive")
        if self.embed_batch_size < 1:
            raise GatewayError("embed_batch_size must be >= 1")


@dataclass(frozen=True)
class GenerationSettings:
    temperature: float = 0.0
    max_output_tokens: int = 256

    def validate(self) -> None:
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise GatewayError("max_output_tokens must be >= 1")


def _pair_key(sample: PromptSample) -> tuple[str, str]:
    return (sample.provenance["user"], sample.provenance["item"])


class GatewayClient:
    """Shared, thread-safe client; one instance serves a whole pipeline run."""

    def __init__(self, config: EndpointConfig,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 jitter_seed: int = 0):
        config.validate()
        self.config = config
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        headers = {}
        if config.auth_env:
            token = os.environ.get(config.auth_env)
            if not token:
                raise GatewayError(
                    f"auth environment variable {config.auth_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout,
            transport=transport,
            headers=headers,
        )
        self.request_count = 0
        self.retry_count = 0

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "GatewayClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport with retry --------------------------------------------

    def _post(self, route: str, body: dict) -> dict:
        last_error: str = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                delay = BACKOFF_BASE_SECONDS * (2 ** (attempt - 1)) \
                    + self._rng.uniform(0.0, 0.1)
                self._sleep(delay)
                self.retry_count += 1
                log.info("retrying %s (attempt %d)", route, attempt + 1)
            try:
                self.request_count += 1
                response = self._client.post(route, json=body)
            except httpx.TransportError as err:
                last_error = f"transport error: {err}"
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = f"status {response.status_code}"
                continue
            if response.status_code != 200:
                raise GatewayError(
                    f"{route}: status {response.status_code}: {response.text[:200]}"
                )
            try:
                return response.json()
            except json.JSONDecodeError as err:
                raise GatewayError(f"{route}: non-JSON reply") from err
        raise GatewayError(
            f"{route}: giving up after {self.config.max_retries + 1} attempts "
            f"({last_error})"
        )

    # -- generation ------------------------------------------------------

    def generate(self, prompt: str,
                 settings: GenerationSettings = GenerationSettings()) -> str:
        settings.validate()
        messages = []
        if self.config.system_message is not None:
            messages.append({"role": "system", "content": self.config.system_message})
        messages.append({"role": "user", "content": prompt})
        body = {
            "model": self.config.model,
            "messages": messages,
            "temperature": settings.temperature,
            "max_tokens": settings.max_output_tokens,
        }
        data = self._post("/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise GatewayError("chat reply missing choices[0].message.content") from None
        text = text.strip()
        if not text:
            raise GatewayError("endpoint returned an empty completion")
        return text

    def batch_generate(self, samples: Sequence[PromptSample], out_path,
                       failures_path,
                       settings: GenerationSettings = GenerationSettings()) -> dict:
        """Generate for every sample; returns {"completed", "failed", "skipped"}.

        The output file is rewritten in input order each run, so resuming
        after an interruption keeps ordering intact while already-completed
        pairs are not re-sent.  Raises only when nothing at all succeeded.
        """
        if not samples:
            raise GatewayError("batch_generate needs at least one prompt")
        settings.validate()
        done: dict[tuple[str, str], str] = {}
        out_path = Path(out_path)
        if out_path.exists():
            with out_path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    done[(rec["user"], rec["item"])] = rec["explanation"]

        todo = [(k, s) for k, s in enumerate(samples) if _pair_key(s) not in done]
        skipped = len(samples) - len(todo)
        failures: list[tuple[int, PromptSample, str]] = []
        results: dict[int, str] = {}

        def worker(entry):
            idx, sample = entry
            return idx, self.generate(sample.prompt, settings)

        if todo:
            with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
                futures = {pool.submit(worker, entry): entry for entry in todo}
                for future, entry in futures.items():
                    idx, sample = entry
                    try:
                        _, text = future.result()
                        results[idx] = text
                    except GatewayError as err:
                        failures.append((idx, sample, str(err)))

        for idx, sample in enumerate(samples):
            key = _pair_key(sample)
            if idx in results:
                done[key] = results[idx]

        if not done:
            raise GatewayError(
                f"all {len(samples)} generation requests failed; "
                f"first error: {failures[0][2]}"
            )

        with out_path.open("w", encoding="utf-8") as fh:
            for sample in samples:
                key = _pair_key(sample)
                if key in done:
                    fh.write(json.dumps({
                        "user": key[0], "item": key[1], "explanation": done[key],
                    }, sort_keys=True) + "\n")
        failures.sort(key=lambda f: f[0])
        with Path(failures_path).open("w", encoding="utf-8") as fh:
            for _, sample, error in failures:
                key = _pair_key(sample)
                fh.write(json.dumps({
                    "user": key[0], "item": key[1], "error": error,
                }, sort_keys=True) + "\n")
        return {"completed": len(results), "failed": len(failures), "skipped": skipped}

    # -- embeddings ------------------------------------------------------

    def _fetch_embeddings(self, texts: list[str]) -> list[list[float]]:
        model = self.config.embed_model or self.config.model
        out: list[list[float]] = []
        for start in range(0, len(texts), self.config.embed_batch_size):
            chunk = texts[start:start + self.config.embed_batch_size]
            data = self._post("/embeddings", {"model": model, "input": chunk})
            try:
                rows = sorted(data["data"], key=lambda r: r["index"])
                vectors = [r["embedding"] for r in rows]
            except (KeyError, TypeError):
                raise GatewayError("embedding reply missing data[].embedding") from None
            if len(vectors) != len(chunk):
                raise GatewayError(
                    f"embedding reply has {len(vectors)} vectors for {len(chunk)} inputs"
                )
            out.extend(vectors)
        return out

    def embed_texts(self, texts: Sequence[str], cache_path=None) -> np.ndarray:
        """Unit-norm embedding per text, order preserved, cache-backed.

        Duplicate texts are fetched once.  With a cache file, only texts
        missing from it are requested and new vectors are appended; a fully
        cached call performs no requests.
        """
        if not texts:
            raise GatewayError("embed_texts needs at least one text")
        keys = [hashlib.sha256(t.encode("utf-8")).hexdigest() for t in texts]
        cached: dict[str, np.ndarray] = {}
        cache_dim: int | None = None
        if cache_path is not None and Path(cache_path).exists():
            cache_dim, records = read_embedding_file(cache_path)
            for rec in records:
                vec = np.asarray(rec["vector"], dtype=np.float64)
                norm = float(np.linalg.norm(vec))
                if norm == 0.0 or not np.isfinite(norm):
                    raise GatewayError(f"cache {cache_path}: zero-norm vector {rec['id']}")
                cached[rec["id"]] = vec / norm

        missing: list[str] = []
        missing_keys: list[str] = []
        seen = set(cached)
        for text, key in zip(texts, keys):
            if key not in seen:
                seen.add(key)
                missing.append(text)
                missing_keys.append(key)

        if missing:
            raw = self._fetch_embeddings(missing)
            dims = {len(v) for v in raw}
            if len(dims) != 1:
                raise GatewayError(f"inconsistent embedding dims in reply: {sorted(dims)}")
            dim = dims.pop()
            if cache_dim is not None and dim != cache_dim:
                raise GatewayError(
                    f"endpoint dim {dim} conflicts with cache dim {cache_dim}"
                )
            for key, vec in zip(missing_keys, raw):
                arr = np.asarray(vec, dtype=np.float64)
                norm = float(np.linalg.norm(arr))
                if norm == 0.0 or not np.isfinite(norm):
                    raise GatewayError("endpoint returned a zero or non-finite vector")
                cached[key] = arr / norm
            if cache_path is not None:
                if cache_dim is None:
                    write_embedding_file(
                        cache_path, dim,
                        ((k, "text", cached[k]) for k in missing_keys),
                    )
                else:
                    with Path(cache_path).open("a", encoding="utf-8") as fh:
                        for k in missing_keys:
                            fh.write(json.dumps({
                                "id": k, "kind": "text",
                                "vector": [float(x) for x in cached[k]],
                            }) + "\n")

        dims = {v.shape[0] for v in cached.values()}
        if len(dims) != 1:
            raise GatewayError(f"inconsistent embedding dims: {sorted(dims)}")
        return np.stack([cached[k] for k in keys])


class EndpointTextEmbedder:
    """Adapter giving GatewayClient.embed_texts the local-embedder interface."""

    def __init__(self, client: GatewayClient, cache_path=None):
        self._client = client
        self._cache_path = cache_path

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return self._client.embed_texts(texts, cache_path=self._cache_path)
