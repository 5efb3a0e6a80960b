from .blocks import ASPP, CBAM, MLP3, FiLM, SEGate, SliceFusion
from .layers import BatchNorm2d, Conv2d, ConvBlock, ConvBNAct, Linear
from .module import Module, Parameter

__all__ = [
    "ASPP",
    "BatchNorm2d",
    "CBAM",
    "Conv2d",
    "ConvBNAct",
    "ConvBlock",
    "FiLM",
    "Linear",
    "MLP3",
    "Module",
    "Parameter",
    "SEGate",
    "SliceFusion",
]
