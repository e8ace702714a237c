"""Two-party private decision-forest evaluation over packed homomorphic encryption."""
from .errors import KangarooError
from .kernels import IMPLEMENTATION
from .model import DecisionTree, Forest, Leaf, Node, build_packed_model
from .phe import PheParams, keygen, make_backend, preset
from .protocol import ClientSession, ServerSession, forest_infer

__version__ = "0.1.0"

__all__ = ["ClientSession", "DecisionTree", "Forest", "IMPLEMENTATION", "KangarooError", "Leaf", "Node",
           "PheParams", "ServerSession", "build_packed_model", "forest_infer", "keygen", "make_backend", "preset"]
