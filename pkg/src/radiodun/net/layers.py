import torch
import torch.nn as nn
import torch.nn.functional as F

NEG_SLOPE = 0.2


class ConvBlock(nn.Sequential):
    """Convolution + batch normalization + leaky rectifier."""

    def __init__(self, in_ch, out_ch, kernel_size=3, groups=1, stride=1, norm=True, act=True):
        layers = [nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2,
                            groups=groups, bias=True)]
        if norm:
            layers.append(nn.BatchNorm2d(out_ch))
        if act:
            layers.append(nn.LeakyReLU(NEG_SLOPE))
        super().__init__(*layers)


def conv2(in_ch, hidden, out_ch):
    """Two consecutive convolution blocks; the second projects linearly to ``out_ch``."""
    return nn.Sequential(ConvBlock(in_ch, hidden), ConvBlock(hidden, out_ch, norm=False, act=False))


class ChannelAttention(nn.Module):
    """Softmax attention over the channel-to-channel affinity matrix.

    Q, K and V each come from a 1x1 convolution followed by a depthwise 3x3
    convolution of the layer-normalized input.  The affinity ``Q K^T`` is
    averaged over spatial positions so that logits stay bounded independently
    of the feature size.  No residual is added here.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.proj = nn.ModuleDict({
            name: nn.Sequential(
                nn.Conv2d(channels, channels, 1),
                nn.Conv2d(channels, channels, 3, padding=1, groups=channels),
            )
            for name in ("q", "k", "v")
        })

    def attention(self, x):
        b, c, h, w = x.shape
        z = self.norm(x)
        q = self.proj["q"](z).reshape(b, c, h * w)
        k = self.proj["k"](z).reshape(b, c, h * w)
        v = self.proj["v"](z).reshape(b, c, h * w)
        attn = torch.softmax(q @ k.transpose(1, 2) / (h * w), dim=-1)
        return attn, v

    def forward(self, x):
        attn, v = self.attention(x)
        return (attn @ v).reshape(x.shape)


class StageBlock(nn.Module):
    """Parallel convolution / channel-attention paths, then a three-layer FFN.

    ``u = x + conv(x) + cam(x)`` and ``out = u + ffn(u)``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv = ConvBlock(channels, channels)
        self.cam = ChannelAttention(channels)
        self.ffn = nn.Sequential(
            ConvBlock(channels, 2 * channels, kernel_size=1),
            ConvBlock(2 * channels, 2 * channels, groups=2 * channels),
            nn.Conv2d(2 * channels, channels, 1),
        )

    def forward(self, x):
        u = x + self.conv(x) + self.cam(x)
        return u + self.ffn(u)


def soft_threshold(z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    # subgradient at |z| == eps is 0 (relu'(0) == 0 in torch)
    return torch.sign(z) * F.relu(torch.abs(z) - eps)
