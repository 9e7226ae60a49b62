"""Decide static feedback equivalence of control-affine systems to triangular forms."""

from .errors import FlatcheckError
from .exprcore import Expr, const, differentiate, evaluate, symbol
from .geomkit import Distribution, OneForm, VectorField, Workspace, lie_bracket
from .modeldsl import SystemModel, euler_lagrange, load_model, loads_model
from .normalforms import crane_model, generate_tf, integrate, scramble
from .parsing import parse_expr
from .pointlinalg import CheckConfig
from .sfechk import CheckReport, StructureIndices, check, check_tf0, check_tf1

__all__ = [
    "CheckConfig", "CheckReport", "Distribution", "Expr", "FlatcheckError", "OneForm",
    "StructureIndices", "SystemModel", "VectorField", "Workspace", "check", "check_tf0",
    "check_tf1", "const", "crane_model", "differentiate", "euler_lagrange", "evaluate",
    "generate_tf", "integrate", "lie_bracket", "load_model", "loads_model", "parse_expr",
    "scramble", "symbol",
]
