"""Duration-informed autoregressive acoustic model with speaker embeddings.

Pipeline: phoneme encoder (embedding + CBHG) -> speaker fusion fc ->
duration-driven state expansion -> frame conditioning (f0, RMSE, position)
-> windowed-attention autoregressive GRU decoder -> residual post-CBHG.
"""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

N_CONDITIONING = 4  # f0 (2) + rmse (1) + position (1)


@dataclass(frozen=True)
class ModelConfig:
    phoneme_embed_dim: int = 256
    speaker_embed_dim: int = 256
    encoder_out_dim: int = 256
    fused_dim: int = 256
    decoder_rnn_dims: tuple = (256, 256)
    attention_dim: int = 256
    reduction_factor: int = 2
    attention_window: int = 10
    prenet_dims: tuple = (256, 128)
    l2_coefficient: float = 1e-6
    mel_bins: int = 80
    cbhg_bank_size: int = 8
    cbhg_channels: int = 128
    highway_layers: int = 4
    prenet_dropout: float = 0.5

    def __post_init__(self):
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        for name in ("phoneme_embed_dim", "speaker_embed_dim", "encoder_out_dim",
                     "fused_dim", "attention_dim", "mel_bins"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.encoder_out_dim % 2:
            raise ValueError("encoder_out_dim must be even (bidirectional GRU)")

    @property
    def decoder_input_dim(self):
        return self.fused_dim + N_CONDITIONING

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["decoder_rnn_dims"] = list(self.decoder_rnn_dims)
        d["prenet_dims"] = list(self.prenet_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["decoder_rnn_dims"] = tuple(d["decoder_rnn_dims"])
        d["prenet_dims"] = tuple(d["prenet_dims"])
        return cls(**d)

    @classmethod
    def tiny(cls, mel_bins=4):
        """Gradient-check scale: all dims 8."""
        return cls(phoneme_embed_dim=8, speaker_embed_dim=8, encoder_out_dim=8,
                   fused_dim=8, decoder_rnn_dims=(8, 8), attention_dim=8,
                   prenet_dims=(8, 8), mel_bins=mel_bins, cbhg_bank_size=2,
                   cbhg_channels=8, highway_layers=2)

    @classmethod
    def toy(cls):
        """Desk-scale config for minutes-long CPU training runs."""
        return cls(phoneme_embed_dim=64, speaker_embed_dim=64, encoder_out_dim=64,
                   fused_dim=64, decoder_rnn_dims=(64, 64), attention_dim=64,
                   prenet_dims=(64, 32), cbhg_bank_size=4, cbhg_channels=32,
                   highway_layers=2)


class Highway(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.h = nn.Linear(dim, dim)
        self.t = nn.Linear(dim, dim)
        self.t.bias.data.fill_(-1.0)

    def forward(self, x):
        gate = torch.sigmoid(self.t(x))
        return gate * F.relu(self.h(x)) + (1.0 - gate) * x


class _ConvBN(nn.Module):
    """1-d convolution with same-length padding and batch norm."""

    def __init__(self, in_ch, out_ch, kernel, activation=True):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(in_ch, out_ch, kernel)
        self.bn = nn.BatchNorm1d(out_ch)
        self.activation = activation

    def forward(self, x):  # B x C x T
        x = F.pad(x, (self.kernel // 2, (self.kernel - 1) // 2))
        x = self.bn(self.conv(x))
        return F.relu(x) if self.activation else x


class CBHG(nn.Module):
    """Conv bank + highway + bidirectional GRU block."""

    def __init__(self, in_dim, out_dim, bank_size, channels, highway_layers):
        super().__init__()
        self.bank = nn.ModuleList(
            [_ConvBN(in_dim, channels, k) for k in range(1, bank_size + 1)])
        self.proj1 = _ConvBN(bank_size * channels, channels, 3)
        self.proj2 = _ConvBN(channels, in_dim, 3, activation=False)
        self.pre_highway = (nn.Linear(in_dim, channels)
                            if in_dim != channels else nn.Identity())
        self.highways = nn.ModuleList([Highway(channels)
                                       for _ in range(highway_layers)])
        self.gru = nn.GRU(channels, out_dim // 2, batch_first=True,
                          bidirectional=True)

    def forward(self, x, lengths=None):
        """x: B x T x in_dim -> B x T x out_dim.

        lengths (if given) bound the bidirectional GRU so padded tail
        frames cannot leak into real positions.
        """
        residual = x
        y = x.transpose(1, 2)
        banked = torch.cat([conv(y) for conv in self.bank], dim=1)
        banked = F.pad(banked, (0, 1))
        pooled = F.max_pool1d(banked, kernel_size=2, stride=1)
        z = self.proj2(self.proj1(pooled)).transpose(1, 2)
        z = z + residual
        z = self.pre_highway(z)
        for hw in self.highways:
            z = hw(z)
        if lengths is not None:
            packed = nn.utils.rnn.pack_padded_sequence(
                z, lengths, batch_first=True, enforce_sorted=False)
            out, _ = self.gru(packed)
            out, _ = nn.utils.rnn.pad_packed_sequence(
                out, batch_first=True, total_length=z.shape[1])
        else:
            out, _ = self.gru(z)
        return out


class Encoder(nn.Module):
    def __init__(self, config, n_phonemes):
        super().__init__()
        self.n_phonemes = n_phonemes
        # one extra row used for batch padding
        self.embedding = nn.Embedding(n_phonemes + 1, config.phoneme_embed_dim)
        self.cbhg = CBHG(config.phoneme_embed_dim, config.encoder_out_dim,
                         config.cbhg_bank_size, config.cbhg_channels,
                         config.highway_layers)

    @property
    def pad_id(self):
        return self.n_phonemes

    def forward(self, phoneme_ids, lengths=None):
        if int(phoneme_ids.max()) > self.n_phonemes or int(phoneme_ids.min()) < 0:
            raise ValueError(
                f"phoneme id out of range [0, {self.n_phonemes})")
        return self.cbhg(self.embedding(phoneme_ids), lengths)


class SpeakerFusion(nn.Module):
    """Row-wise fc over concat(encoder state, speaker vector), tanh bounded."""

    def __init__(self, config):
        super().__init__()
        self.fc = nn.Linear(config.encoder_out_dim + config.speaker_embed_dim,
                            config.fused_dim)

    def forward(self, states, speaker_vec):
        # states: B x N x E; speaker_vec: B x S
        expanded = speaker_vec.unsqueeze(1).expand(-1, states.shape[1], -1)
        return torch.tanh(self.fc(torch.cat([states, expanded], dim=-1)))


def state_expand(states, durations):
    """Repeat row i of states durations[i] times. states: N x D."""
    if states.shape[0] != len(durations):
        raise ValueError(
            f"{states.shape[0]} states but {len(durations)} durations")
    durations = torch.as_tensor(durations, dtype=torch.long, device=states.device)
    if (durations < 1).any():
        raise ValueError("durations must be >= 1")
    return torch.repeat_interleave(states, durations, dim=0)


def assemble_decoder_input(expanded, f0_cond, rmse, positions):
    """Columnwise concat: expanded | f0 (2) | rmse (1) | position (1)."""
    t = expanded.shape[0]
    rmse = rmse.reshape(-1, 1)
    positions = positions.reshape(-1, 1)
    for name, arr in (("f0_cond", f0_cond), ("rmse", rmse), ("positions", positions)):
        if arr.shape[0] != t:
            raise ValueError(f"{name} has {arr.shape[0]} frames, expected {t}")
    return torch.cat([expanded, f0_cond, rmse, positions], dim=-1)


class LocalAttention(nn.Module):
    """Additive attention over a window of frames around the current index."""

    def __init__(self, query_dim, memory_dim, attention_dim, window):
        super().__init__()
        self.query_proj = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory_proj = nn.Linear(memory_dim, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=False)
        self.window = window

    def forward(self, query, memory, t, lengths):
        """query: B x Q; memory: B x T x D; lengths: B true frame counts.

        Attends to rows [max(0, t-W), min(length, t+W+1)); returns
        (context B x D, weights B x T).
        """
        b, total, _ = memory.shape
        scores = self.v(torch.tanh(
            self.query_proj(query).unsqueeze(1) + self.memory_proj(memory)))
        scores = scores.squeeze(-1)  # B x T
        idx = torch.arange(total, device=memory.device).unsqueeze(0)
        lengths = torch.as_tensor(lengths, dtype=torch.long,
                                  device=memory.device).reshape(-1, 1)
        # clamp the center so shorter batch items keep a non-empty window
        center = torch.clamp(torch.full_like(lengths, t), max=lengths - 1)
        lo = torch.clamp(center - self.window, min=0)
        hi = torch.minimum(lengths, center + self.window + 1)
        valid = (idx >= lo) & (idx < hi)
        scores = scores.masked_fill(~valid, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights


class Prenet(nn.Module):
    def __init__(self, in_dim, dims, dropout):
        super().__init__()
        sizes = [in_dim] + list(dims)
        self.layers = nn.ModuleList(
            [nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:])])
        self.dropout = dropout

    def forward(self, x):
        for layer in self.layers:
            x = F.relu(layer(x))
            x = F.dropout(x, p=self.dropout, training=self.training)
        return x


class Decoder(nn.Module):
    """Two stacked GRU cells decoding reduction_factor frames per step."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.prenet = Prenet(config.mel_bins, config.prenet_dims,
                             config.prenet_dropout)
        self.attention = LocalAttention(
            config.decoder_rnn_dims[0], config.decoder_input_dim,
            config.attention_dim, config.attention_window)
        self.gru1 = nn.GRUCell(
            config.prenet_dims[-1] + config.decoder_input_dim,
            config.decoder_rnn_dims[0])
        self.gru2 = nn.GRUCell(config.decoder_rnn_dims[0],
                               config.decoder_rnn_dims[1])
        self.proj = nn.Linear(config.decoder_rnn_dims[1],
                              config.reduction_factor * config.mel_bins)

    def forward(self, conditioned, lengths, targets=None):
        """conditioned: B x T x decoder_input_dim -> pre-postnet mel B x T x M.

        Teacher-forced when targets (B x T x M) are given, free-running
        otherwise. T is internally padded to a multiple of the reduction
        factor with the last frame and trimmed back afterward.
        """
        cfg = self.config
        b, t, _ = conditioned.shape
        r = cfg.reduction_factor
        pad = (-t) % r
        if pad:
            conditioned = torch.cat(
                [conditioned, conditioned[:, -1:].expand(-1, pad, -1)], dim=1)
            if targets is not None:
                targets = torch.cat(
                    [targets, targets[:, -1:].expand(-1, pad, -1)], dim=1)
        steps = (t + pad) // r
        h1 = conditioned.new_zeros(b, cfg.decoder_rnn_dims[0])
        h2 = conditioned.new_zeros(b, cfg.decoder_rnn_dims[1])
        prev = conditioned.new_zeros(b, cfg.mel_bins)  # "go" frame
        outputs = []
        for k in range(steps):
            context, _ = self.attention(h1, conditioned, k * r, lengths)
            x = torch.cat([self.prenet(prev), context], dim=-1)
            h1 = self.gru1(x, h1)
            h2 = self.gru2(h1, h2)
            frames = self.proj(h2).view(b, r, cfg.mel_bins)
            outputs.append(frames)
            if targets is not None:
                prev = targets[:, (k + 1) * r - 1]
            else:
                prev = frames[:, -1]
        out = torch.cat(outputs, dim=1)
        return out[:, :t]


class Postnet(nn.Module):
    """Residual CBHG refinement of the decoder output."""

    def __init__(self, config):
        super().__init__()
        self.cbhg = CBHG(config.mel_bins, config.encoder_out_dim,
                         config.cbhg_bank_size, config.cbhg_channels,
                         config.highway_layers)
        self.out_proj = nn.Linear(config.encoder_out_dim, config.mel_bins)

    def forward(self, pre_mel, lengths=None):
        return pre_mel + self.out_proj(self.cbhg(pre_mel, lengths))


class AcousticModel(nn.Module):
    def __init__(self, config, n_phonemes, n_speakers):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config, n_phonemes)
        self.speaker_embedding = nn.Embedding(n_speakers, config.speaker_embed_dim)
        nn.init.uniform_(self.speaker_embedding.weight, -0.1, 0.1)
        self.fusion = SpeakerFusion(config)
        self.decoder = Decoder(config)
        self.postnet = Postnet(config)

    def forward(self, phoneme_ids, speaker_ids, durations, f0_cond, rmse,
                positions, targets=None, phone_lengths=None, frame_lengths=None):
        """Full pass for a padded batch.

        phoneme_ids: B x N (pad id allowed past phone_lengths); durations:
        list/tensor of per-phone frame counts per item; conditioning tracks
        are B x T x *; targets enable teacher forcing. Returns
        (pre_mel, post_mel), each B x T x mel_bins.
        """
        b = phoneme_ids.shape[0]
        if phone_lengths is None:
            phone_lengths = [phoneme_ids.shape[1]] * b
        encoded = self.encoder(phoneme_ids, phone_lengths)
        fused = self.fusion(encoded, self.speaker_embedding(speaker_ids))
        t_max = f0_cond.shape[1]
        if frame_lengths is None:
            frame_lengths = [int(sum(d)) for d in durations]
        expanded = f0_cond.new_zeros(b, t_max, self.config.fused_dim)
        for i in range(b):
            n = phone_lengths[i]
            rows = state_expand(fused[i, :n], durations[i][:n])
            expanded[i, :rows.shape[0]] = rows
        conditioned = torch.cat(
            [expanded, f0_cond, rmse.unsqueeze(-1), positions.unsqueeze(-1)],
            dim=-1)
        pre = self.decoder(conditioned, frame_lengths, targets)
        post = self.postnet(pre, frame_lengths)
        return pre, post

    def l2_parameters(self):
        """Weight matrices subject to l2 regularization.

        Excludes embeddings, biases and batch-norm scale vectors.
        """
        for name, p in self.named_parameters():
            if "embedding" in name or p.dim() < 2:
                continue
            yield p


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l1_post: torch.Tensor
    l1_pre: torch.Tensor
    l2: torch.Tensor


def compute_loss(targets, pre_mel, post_mel, model=None, l2_coefficient=0.0,
                 mask=None):
    """Mean absolute error before and after the postnet plus l2 penalty.

    Both L1 terms are means over all (valid) frames and mel bins; the l2
    term sums squared entries of every non-embedding, non-bias weight.
    mask: B x T with 1 on real frames, 0 on padding.
    """
    if targets.shape != pre_mel.shape or targets.shape != post_mel.shape:
        raise ValueError("target/prediction shape mismatch")
    if mask is None:
        l1_post = (post_mel - targets).abs().mean()
        l1_pre = (pre_mel - targets).abs().mean()
    else:
        m = mask.unsqueeze(-1)
        denom = m.sum() * targets.shape[-1]
        l1_post = ((post_mel - targets).abs() * m).sum() / denom
        l1_pre = ((pre_mel - targets).abs() * m).sum() / denom
    l2 = targets.new_zeros(())
    if model is not None and l2_coefficient:
        for p in model.l2_parameters():
            l2 = l2 + (p ** 2).sum()
        l2 = l2_coefficient * l2
    return LossBreakdown(l1_post + l1_pre + l2, l1_post, l1_pre, l2)
