"""Joint training over mixed speech+singing data with learnable speaker embeddings."""
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import corpus as corpus_mod
from . import signal as sig
from .model import AcousticModel, ModelConfig, compute_loss

CHECKPOINT_VERSION = 1
F0_REFERENCE_HZ = 220.0


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 8
    seed: int = 0
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1000
    # relative sampling weight per utterance kind
    kind_weights: dict = field(default_factory=lambda: {"speech": 1.0, "singing": 1.0})

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be <= total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_schedule(step, config):
    """Linear warm-up to base_lr, constant thereafter."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return config.base_lr * min(step / config.warmup_steps, 1.0)


def normalize_mel(mel, mean, std):
    return (mel - mean) / std


def denormalize_mel(mel, mean, std):
    return mel * std + mean


def collate(utterances, records, corpus, mel_mean, mel_std, frame_config,
            dtype=torch.float32):
    """Pad a list of utterances into batch tensors.

    Mel targets are normalized; padded frames carry the normalized
    log-floor (silence) value and mask 0.
    """
    n_max = max(len(u.phonemes) for u in utterances)
    t_max = max(records[u.id].frames for u in utterances)
    pad_id = len(corpus.inventory)
    b = len(utterances)
    pad_value = normalize_mel(np.log(frame_config.log_floor), mel_mean, mel_std)
    phoneme_ids = torch.full((b, n_max), pad_id, dtype=torch.long)
    speaker_ids = torch.zeros(b, dtype=torch.long)
    f0_cond = torch.zeros(b, t_max, 2, dtype=dtype)
    rmse = torch.zeros(b, t_max, dtype=dtype)
    positions = torch.zeros(b, t_max, dtype=dtype)
    targets = torch.zeros(b, t_max, len(mel_mean), dtype=dtype)
    targets[:] = torch.as_tensor(pad_value, dtype=dtype)
    mask = torch.zeros(b, t_max, dtype=dtype)
    durations = []
    phone_lengths = []
    frame_lengths = []
    for i, u in enumerate(utterances):
        rec = records[u.id]
        n, t = len(u.phonemes), rec.frames
        phoneme_ids[i, :n] = torch.tensor(
            [corpus.phoneme_index(p.symbol) for p in u.phonemes])
        speaker_ids[i] = corpus.speakers[u.speaker_id]
        f0_cond[i, :t] = torch.as_tensor(
            sig.f0_conditioning(rec.f0, F0_REFERENCE_HZ), dtype=dtype)
        rmse[i, :t] = torch.as_tensor(rec.rmse, dtype=dtype)
        positions[i, :t] = torch.as_tensor(rec.positions, dtype=dtype)
        targets[i, :t] = torch.as_tensor(
            normalize_mel(rec.mel, mel_mean, mel_std), dtype=dtype)
        mask[i, :t] = 1.0
        durations.append(list(u.durations))
        phone_lengths.append(n)
        frame_lengths.append(t)
    return {
        "phoneme_ids": phoneme_ids, "speaker_ids": speaker_ids,
        "durations": durations, "f0_cond": f0_cond, "rmse": rmse,
        "positions": positions, "targets": targets, "mask": mask,
        "phone_lengths": phone_lengths, "frame_lengths": frame_lengths,
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def model_config_hash(model_config, frame_config):
    blob = json.dumps({"model": model_config.to_dict(),
                       "frame": frame_config.to_dict()}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, payload):
    """Versioned container: JSON header line + torch payload, checksummed."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    header = {
        "version": CHECKPOINT_VERSION,
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
        "model_config_hash": model_config_hash(
            ModelConfig.from_dict(payload["model_config"]),
            sig.FrameConfig.from_dict(payload["frame_config"])),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config_hash=None):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{header.get('version')}")
    if hashlib.sha256(blob).hexdigest() != header["payload_sha256"]:
        raise ValueError(f"{path}: checkpoint checksum mismatch (corrupt file)")
    if (expected_config_hash is not None
            and header["model_config_hash"] != expected_config_hash):
        raise ValueError(f"{path}: model config hash mismatch")
    return torch.load(io.BytesIO(blob), weights_only=False)


class Checkpoint:
    """Loaded checkpoint with the model rebuilt and ready for inference."""

    def __init__(self, payload):
        self.payload = payload
        self.model_config = ModelConfig.from_dict(payload["model_config"])
        self.frame_config = sig.FrameConfig.from_dict(payload["frame_config"])
        self.speakers = dict(payload["speakers"])
        self.inventory = tuple(payload["inventory"])
        self.mel_mean = np.asarray(payload["mel_mean"])
        self.mel_std = np.asarray(payload["mel_std"])
        self.step = payload["step"]
        self.model = AcousticModel(self.model_config, len(self.inventory),
                                   len(self.speakers))
        self.model.load_state_dict(payload["model_state"])
        self.model.eval()

    @classmethod
    def load(cls, path):
        return cls(load_checkpoint(path))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _sampling_weights(corpus, kind_weights):
    w = np.array([kind_weights.get(u.kind, 1.0) for u in corpus.utterances],
                 dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("sampling weights sum to zero")
    return w / w.sum()


def train(corpus, records, model_config, train_config, frame_config, out_dir,
          resume_from=None):
    """Run the optimization loop; returns the final checkpoint path.

    Deterministic for fixed (corpus, configs, seed); a run resumed from a
    checkpoint reproduces the uninterrupted loss trajectory bit-exactly.
    """
    if not corpus.utterances:
        raise ValueError("corpus is empty")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model_config = ModelConfig.from_dict(payload["model_config"])
        frame_config = sig.FrameConfig.from_dict(payload["frame_config"])
        train_config = TrainConfig.from_dict(payload["train_config"])
        mel_mean = np.asarray(payload["mel_mean"])
        mel_std = np.asarray(payload["mel_std"])
        model = AcousticModel(model_config, len(corpus.inventory),
                              len(corpus.speakers))
        model.load_state_dict(payload["model_state"])
        optimizer = _make_optimizer(model, train_config)
        optimizer.load_state_dict(payload["optimizer_state"])
        sampler = np.random.default_rng()
        sampler.bit_generator.state = payload["sampler_state"]
        torch.set_rng_state(torch.as_tensor(payload["torch_rng_state"],
                                            dtype=torch.uint8))
        step = payload["step"]
        log_mode = "a"
    else:
        torch.manual_seed(train_config.seed)
        mel_mean, mel_std = corpus_mod.mel_statistics(list(records.values()))
        model = AcousticModel(model_config, len(corpus.inventory),
                              len(corpus.speakers))
        optimizer = _make_optimizer(model, train_config)
        sampler = np.random.default_rng(train_config.seed + 1)
        step = 0
        log_mode = "w"

    weights = _sampling_weights(corpus, train_config.kind_weights)
    n = len(corpus.utterances)
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")

    def snapshot():
        return {
            "model_config": model_config.to_dict(),
            "frame_config": frame_config.to_dict(),
            "train_config": train_config.to_dict(),
            "speakers": dict(corpus.speakers),
            "inventory": list(corpus.inventory),
            "mel_mean": mel_mean, "mel_std": mel_std,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "sampler_state": sampler.bit_generator.state,
            "torch_rng_state": torch.get_rng_state().numpy(),
            "step": step,
        }

    model.train()
    with open(metrics_path, log_mode) as log:
        while step < train_config.total_steps:
            step += 1
            idx = sampler.choice(n, size=train_config.batch_size, replace=True,
                                 p=weights)
            batch_utts = [corpus.utterances[i] for i in idx]
            batch = collate(batch_utts, records, corpus, mel_mean, mel_std,
                            frame_config)
            pre, post = model(
                batch["phoneme_ids"], batch["speaker_ids"], batch["durations"],
                batch["f0_cond"], batch["rmse"], batch["positions"],
                targets=batch["targets"], phone_lengths=batch["phone_lengths"],
                frame_lengths=batch["frame_lengths"])
            loss = compute_loss(batch["targets"], pre, post, model,
                                model_config.l2_coefficient, batch["mask"])
            if not torch.isfinite(loss.total):
                raise RuntimeError(
                    f"non-finite loss at step {step} on batch "
                    f"{[u.id for u in batch_utts]}")
            optimizer.zero_grad()
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           train_config.grad_clip_norm)
            lr = lr_schedule(step, train_config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            log.write(json.dumps({
                "step": step, "lr": lr,
                "loss": loss.total.item(),
                "l1_post": loss.l1_post.item(),
                "l1_pre": loss.l1_pre.item(),
                "l2": loss.l2.item(),
            }) + "\n")
            if (step % train_config.checkpoint_every == 0
                    or step == train_config.total_steps):
                save_checkpoint(ckpt_path, snapshot())
    save_checkpoint(ckpt_path, snapshot())
    return ckpt_path


def _make_optimizer(model, train_config):
    return torch.optim.Adam(
        model.parameters(), lr=train_config.base_lr,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
        eps=train_config.adam_eps)


def evaluate(checkpoint, corpus, records):
    """Teacher-forced normalized mel L1 overall, per kind and per speaker."""
    utts = [u for u in corpus.utterances if u.id in records]
    if not utts:
        raise ValueError("evaluation set is empty")
    model = checkpoint.model
    model.eval()
    per_utt = {}
    with torch.no_grad():
        for u in utts:
            if u.speaker_id not in checkpoint.speakers:
                raise ValueError(f"speaker {u.speaker_id!r} not in checkpoint "
                                 f"registry {sorted(checkpoint.speakers)}")
            batch = collate([u], records, corpus, checkpoint.mel_mean,
                            checkpoint.mel_std, checkpoint.frame_config)
            batch["speaker_ids"][0] = checkpoint.speakers[u.speaker_id]
            pre, post = model(
                batch["phoneme_ids"], batch["speaker_ids"], batch["durations"],
                batch["f0_cond"], batch["rmse"], batch["positions"],
                targets=batch["targets"], phone_lengths=batch["phone_lengths"],
                frame_lengths=batch["frame_lengths"])
            loss = compute_loss(batch["targets"], pre, post, mask=batch["mask"])
            per_utt[u.id] = {"l1_post": float(loss.l1_post),
                             "l1_pre": float(loss.l1_pre),
                             "kind": u.kind, "speaker": u.speaker_id}

    def agg(items):
        return float(np.mean([v["l1_post"] for v in items]))

    metrics = {
        "overall_l1": agg(list(per_utt.values())),
        "per_kind": {}, "per_speaker": {}, "per_utterance": per_utt,
    }
    for kind in sorted({v["kind"] for v in per_utt.values()}):
        metrics["per_kind"][kind] = agg(
            [v for v in per_utt.values() if v["kind"] == kind])
    for spk in sorted({v["speaker"] for v in per_utt.values()}):
        metrics["per_speaker"][spk] = agg(
            [v for v in per_utt.values() if v["speaker"] == spk])
    return metrics
