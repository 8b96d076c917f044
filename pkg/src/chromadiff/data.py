"""Paired colorization dataset: grayscale inputs, color targets, prompts.

build_dataset turns a directory of color images into (input, target) PNG
pairs plus a newline-delimited JSON manifest whose records carry exactly
{input, target, prompt, split}.  Training samples draw a prompt uniformly
from the pool; validation samples always use the base prompt.

The grayscale input is written through the same 8-bit quantization as the
target, so the pairing invariant — decoded input equals the 8-bit-quantized
grayscale of the decoded target — holds exactly, not just within tolerance.
"""

import csv
import dataclasses
import json
import os
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import colorspace

BASE_PROMPT = "colorize the image"

# Static paraphrase pool used for offline builds (default 30 prompts).
BUNDLED_PROMPTS = (
    "add natural colors to this black and white photo",
    "turn the grayscale picture into a color photograph",
    "bring this monochrome image to life with color",
    "restore realistic colors to the photo",
    "apply lifelike coloring to the grayscale image",
    "convert the black and white image into full color",
    "paint the photo with natural hues",
    "give this old photograph realistic colors",
    "make the monochrome picture colorful",
    "fill the image with true to life colors",
    "render the grayscale photo in color",
    "recolor the black and white picture naturally",
    "add vivid yet realistic tones to the image",
    "transform the gray photo into a colored one",
    "breathe color into the monochrome photograph",
    "produce a colorized version of this image",
    "reconstruct the original colors of the photo",
    "tint the grayscale image with plausible colors",
    "colorize this vintage photograph",
    "apply photorealistic color to the picture",
    "turn shades of gray into natural color",
    "enrich the black and white photo with color",
    "generate a full color rendition of the image",
    "restore the scene's true colors",
    "bring out lifelike colors in this picture",
    "convert monochrome tones into realistic hues",
    "give the photograph a naturally colored look",
    "repaint this gray image with accurate colors",
    "create a believable color version of the photo",
    "saturate the black and white image with real colors",
)

PROMPT_ENDPOINT_ENV = "CHROMADIFF_PROMPT_ENDPOINT"
PROMPT_TOKEN_ENV = "CHROMADIFF_PROMPT_TOKEN"


class DataError(ValueError):
    pass


class PromptClientError(RuntimeError):
    pass


def normalize_prompt(text):
    return " ".join(str(text).lower().split())


@dataclass(frozen=True)
class PromptPool:
    train_prompts: tuple
    base_prompt: str = BASE_PROMPT

    def __post_init__(self):
        object.__setattr__(self, "train_prompts", tuple(self.train_prompts))
        if not self.train_prompts:
            raise DataError("prompt pool needs at least one training prompt")
        base_norm = normalize_prompt(self.base_prompt)
        seen = set()
        for p in self.train_prompts:
            norm = normalize_prompt(p)
            if not norm:
                raise DataError("empty training prompt")
            if norm == base_norm:
                raise DataError(
                    f"training prompt equals the base prompt: {p!r}")
            if norm in seen:
                raise DataError(f"duplicate training prompt: {p!r}")
            seen.add(norm)


class HttpPromptClient:
    """POSTs {base, n} as JSON and expects a JSON array of paraphrases."""

    def __init__(self, endpoint, token=None, timeout=10.0):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout

    def __call__(self, base, n):
        payload = json.dumps({"base": base, "n": int(n)}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=payload,
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise PromptClientError(f"prompt endpoint failed: {exc}") from exc
        try:
            out = json.loads(body)
        except json.JSONDecodeError as exc:
            raise PromptClientError(f"non-JSON response: {exc}") from exc
        if not isinstance(out, list) or \
                not all(isinstance(s, str) for s in out):
            raise PromptClientError("expected a JSON array of strings")
        return out


def client_from_env(environ=os.environ):
    endpoint = environ.get(PROMPT_ENDPOINT_ENV)
    if not endpoint:
        return None
    return HttpPromptClient(endpoint, token=environ.get(PROMPT_TOKEN_ENV))


def expand_prompts(base=BASE_PROMPT, n=30, client=None, retries=3):
    """Build a PromptPool of n paraphrases of `base`.

    Offline (client=None): the first n bundled paraphrases.  With a client:
    paraphrases are requested, duplicates and base-equal entries filtered,
    and the client re-queried up to `retries` times; any remaining shortfall
    (or a client failure) falls back to the bundled list with a warning.
    """
    if n < 1:
        raise DataError(f"need n >= 1 prompts, got {n}")
    if client is None:
        if n > len(BUNDLED_PROMPTS):
            raise DataError(
                f"only {len(BUNDLED_PROMPTS)} bundled prompts available, "
                f"asked for {n} (configure a prompt client for more)")
        return PromptPool(train_prompts=BUNDLED_PROMPTS[:n],
                          base_prompt=base)

    base_norm = normalize_prompt(base)
    collected, seen = [], set()
    try:
        for _ in range(retries):
            if len(collected) >= n:
                break
            for cand in client(base, n - len(collected)):
                norm = normalize_prompt(cand)
                if not norm or norm == base_norm or norm in seen:
                    continue
                seen.add(norm)
                collected.append(" ".join(cand.split()))
                if len(collected) == n:
                    break
    except PromptClientError as exc:
        warnings.warn(f"prompt client failed ({exc}); "
                      "falling back to bundled prompts")
    if len(collected) < n:
        if collected:
            warnings.warn(
                f"prompt client returned {len(collected)}/{n} usable "
                "paraphrases; topping up from the bundled list")
        for cand in BUNDLED_PROMPTS:
            if len(collected) >= n:
                break
            norm = normalize_prompt(cand)
            if norm != base_norm and norm not in seen:
                seen.add(norm)
                collected.append(cand)
    if len(collected) < n:
        raise DataError(f"could not assemble {n} distinct prompts")
    return PromptPool(train_prompts=collected, base_prompt=base)


@dataclass(frozen=True)
class SamplePair:
    input: str
    target: str
    prompt: str
    split: str


@dataclass
class DatasetManifest:
    samples: list
    seed: int
    image_size: int
    created_at: str = ""
    root: str = ""

    def split_samples(self, split):
        return [s for s in self.samples if s.split == split]


@dataclass(frozen=True)
class Violation:
    sample: str
    rule: str
    detail: str


MANIFEST_NAME = "manifest.jsonl"
META_NAME = "dataset_meta.json"


def center_crop_resize(im, size):
    """Center-crop a PIL image square, then resize to (size, size)."""
    w, h = im.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    im = im.crop((left, top, left + s, top + s))
    return im.resize((size, size), Image.Resampling.LANCZOS)


def build_dataset(src_dir, out_dir, pool, image_size=64, val_fraction=0.1,
                  seed=0):
    """Build paired data from the color images in src_dir.

    Deterministic in (sorted file list, seed, config): the split permutation
    is drawn first, then one prompt index per training sample in manifest
    order.  Returns the DatasetManifest; writes inputs/, targets/,
    manifest.jsonl and dataset_meta.json under out_dir.
    """
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if image_size < 4:
        raise DataError(f"image_size too small: {image_size}")
    names = sorted(os.listdir(src_dir))
    decoded, skipped = [], 0
    for name in names:
        path = os.path.join(src_dir, name)
        if not os.path.isfile(path):
            continue
        try:
            with Image.open(path) as im:
                rgb = center_crop_resize(im.convert("RGB"), image_size)
                decoded.append((name, np.asarray(rgb, dtype=np.uint8)))
        except (UnidentifiedImageError, OSError) as exc:
            skipped += 1
            warnings.warn(f"skipping undecodable image {name}: {exc}")
    if len(decoded) < 2:
        raise DataError(
            f"need at least 2 decodable images in {src_dir}, "
            f"got {len(decoded)} ({skipped} skipped)")

    n = len(decoded)
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), 0xDA7A])))
    val_set = set(rng.permutation(n)[:n_val].tolist())

    os.makedirs(os.path.join(out_dir, "inputs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
    samples = []
    for i, (_, arr) in enumerate(decoded):
        target_rel = os.path.join("targets", f"{i:05d}.png")
        input_rel = os.path.join("inputs", f"{i:05d}.png")
        target_float = arr / 255.0
        gray_float = colorspace.to_grayscale(target_float)
        Image.fromarray(arr, mode="RGB").save(os.path.join(out_dir, target_rel))
        colorspace.save_image(os.path.join(out_dir, input_rel), gray_float)
        if i in val_set:
            split, prompt = "val", pool.base_prompt
        else:
            split = "train"
            prompt = pool.train_prompts[
                int(rng.integers(len(pool.train_prompts)))]
        samples.append(SamplePair(input=input_rel, target=target_rel,
                                  prompt=prompt, split=split))

    manifest = DatasetManifest(
        samples=samples, seed=int(seed), image_size=int(image_size),
        created_at=datetime.now(timezone.utc).isoformat(), root=str(out_dir))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        for s in samples:
            fh.write(json.dumps(dataclasses.asdict(s), sort_keys=True) + "\n")
    meta = {
        "seed": manifest.seed,
        "image_size": manifest.image_size,
        "created_at": manifest.created_at,
        "val_fraction": val_fraction,
        "n_samples": n,
        "n_skipped": skipped,
        "base_prompt": pool.base_prompt,
        "n_prompts": len(pool.train_prompts),
    }
    with open(os.path.join(out_dir, META_NAME), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(dataset_dir):
    """Read manifest.jsonl + dataset_meta.json back into a DatasetManifest."""
    samples = []
    with open(os.path.join(dataset_dir, MANIFEST_NAME)) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            extra = set(rec) - {"input", "target", "prompt", "split"}
            if extra:
                raise DataError(f"unexpected manifest fields: {sorted(extra)}")
            samples.append(SamplePair(**rec))
    with open(os.path.join(dataset_dir, META_NAME)) as fh:
        meta = json.load(fh)
    return DatasetManifest(samples=samples, seed=meta["seed"],
                           image_size=meta["image_size"],
                           created_at=meta.get("created_at", ""),
                           root=str(dataset_dir))


def _try_decode(path):
    try:
        return colorspace.load_image(path)
    except (FileNotFoundError, UnidentifiedImageError, OSError):
        return None


def validate_manifest(manifest, base_prompt=BASE_PROMPT):
    """Check every invariant; returns a list of Violations (empty = valid)."""
    out = []
    root = manifest.root
    seen_targets = {"train": set(), "val": set()}
    base_norm = normalize_prompt(base_prompt)
    for s in manifest.samples:
        name = s.target
        if s.split not in ("train", "val"):
            out.append(Violation(name, "split", f"unknown split {s.split!r}"))
            continue
        seen_targets[s.split].add(s.target)
        inp = _try_decode(os.path.join(root, s.input))
        tgt = _try_decode(os.path.join(root, s.target))
        if inp is None:
            out.append(Violation(name, "missing-file",
                                 f"input {s.input} missing or undecodable"))
        if tgt is None:
            out.append(Violation(name, "missing-file",
                                 f"target {s.target} missing or undecodable"))
        if inp is not None and tgt is not None:
            if tgt.shape[0] != manifest.image_size or \
                    tgt.shape[1] != manifest.image_size:
                out.append(Violation(
                    name, "size",
                    f"target is {tgt.shape[1]}x{tgt.shape[0]}, manifest says "
                    f"{manifest.image_size}"))
            expected = colorspace.quantize8(colorspace.to_grayscale(tgt))
            if inp.shape != expected.shape or \
                    np.abs(inp - expected).max() > 1e-6:
                out.append(Violation(
                    name, "grayscale-pairing",
                    "input is not the grayscale of its target"))
        if s.split == "val" and s.prompt != base_prompt:
            out.append(Violation(
                name, "val-prompt",
                f"val prompt {s.prompt!r} != {base_prompt!r}"))
        if s.split == "train" and normalize_prompt(s.prompt) == base_norm:
            out.append(Violation(
                name, "prompt-exclusion",
                "training sample uses the held-out base prompt"))
        if s.split == "train" and not normalize_prompt(s.prompt):
            out.append(Violation(name, "prompt", "empty training prompt"))
    overlap = seen_targets["train"] & seen_targets["val"]
    for t in sorted(overlap):
        out.append(Violation(t, "split-overlap",
                             "target appears in both train and val"))
    return out


def load_arrays(manifest, split=None):
    """Decode manifest samples to ((inputs, targets, prompts)) arrays."""
    chosen = manifest.samples if split is None \
        else manifest.split_samples(split)
    if not chosen:
        raise DataError(f"no samples for split {split!r}")
    inputs = np.stack([colorspace.load_image(os.path.join(manifest.root,
                                                          s.input))
                       for s in chosen])
    targets = np.stack([colorspace.load_image(os.path.join(manifest.root,
                                                           s.target))
                        for s in chosen])
    prompts = [s.prompt for s in chosen]
    return inputs, targets, prompts


def manifest_digest(manifest):
    """Stable content hash of the sample records (for sweep arm identity)."""
    import hashlib
    h = hashlib.sha256()
    for s in manifest.samples:
        h.update(json.dumps(dataclasses.asdict(s), sort_keys=True).encode())
    return h.hexdigest()
