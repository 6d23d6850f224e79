"""Scalar expressions with exact derivatives.

Expressions are parsed from strings built from a closed set of primitives
(``+ - * / **``, ``exp``, ``sin``, ``cos``, ``tanh``, ``log``, ``sqrt``) in
the variables ``mu`` and ``eta1 .. etan`` (plus the shorthand ``etasq`` for
``|eta|^2``).  The same compiled expression evaluates on floats, numpy arrays
or :class:`Taylor` objects; the latter carry a truncated multivariate Taylor
expansion and give exact partial derivatives to any order.
"""
from __future__ import annotations

import ast
import math
from functools import lru_cache

import numpy as np

__all__ = ["TaylorSpace", "Taylor", "Expression", "parse_expression"]


class TaylorSpace:
    """Monomials of total degree <= ``order`` in ``nvars`` variables."""

    def __init__(self, nvars, order):
        self.nvars = int(nvars)
        self.order = int(order)
        monos = []
        for deg in range(self.order + 1):
            monos.extend(_exponents_of_degree(self.nvars, deg))
        self.monomials = tuple(monos)
        self.index = {m: i for i, m in enumerate(monos)}
        self.degree = np.array([sum(m) for m in monos])
        # product table grouped by the left factor
        pairs = []
        for ia, ma in enumerate(monos):
            for ib, mb in enumerate(monos):
                mc = tuple(x + y for x, y in zip(ma, mb))
                if sum(mc) <= self.order:
                    pairs.append((ia, ib, self.index[mc]))
        self._pairs = pairs

    def __eq__(self, other):
        return isinstance(other, TaylorSpace) and (self.nvars, self.order) == (other.nvars, other.order)

    def __hash__(self):
        return hash((self.nvars, self.order))

    @property
    def size(self):
        return len(self.monomials)

    def mul(self, a, b):
        out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        for ia, ib, ic in self._pairs:
            out[ic] += a[ia] * b[ib]
        return out


@lru_cache(maxsize=None)
def _space(nvars, order):
    return TaylorSpace(nvars, order)


def _exponents_of_degree(nvars, deg):
    if nvars == 1:
        return [(deg,)]
    out = []
    for first in range(deg, -1, -1):
        for rest in _exponents_of_degree(nvars - 1, deg - first):
            out.append((first,) + rest)
    return out


class Taylor:
    """Truncated multivariate Taylor expansion with array-valued coefficients.

    ``coeffs[i]`` is the coefficient of monomial ``space.monomials[i]`` (plain
    Taylor coefficient, i.e. derivative divided by the factorials).
    """

    __array_ufunc__ = None

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)

    @classmethod
    def variable(cls, nvars, order, which, value):
        space = _space(nvars, order)
        value = np.asarray(value, dtype=float)
        c = np.zeros((space.size,) + value.shape)
        c[0] = value
        if order >= 1:
            e = [0] * nvars
            e[which] = 1
            c[space.index[tuple(e)]] = 1.0
        return cls(space, c)

    @classmethod
    def constant(cls, space, value):
        value = np.asarray(value, dtype=float)
        c = np.zeros((space.size,) + value.shape)
        c[0] = value
        return cls(space, c)

    @property
    def value(self):
        return self.coeffs[0]

    def coefficient(self, exponent):
        return self.coeffs[self.space.index[tuple(exponent)]]

    def derivative(self, exponent):
        """Partial derivative d^|e| / dx^e at the expansion point."""
        f = 1.0
        for e in exponent:
            f *= math.factorial(e)
        return self.coefficient(exponent) * f

    def _lift(self, other):
        if isinstance(other, Taylor):
            if other.space != self.space:
                raise ValueError("mixing Taylor objects from different spaces")
            return other.coeffs
        other = np.asarray(other, dtype=float)
        c = np.zeros((self.space.size,) + np.broadcast_shapes(other.shape, self.coeffs.shape[1:]))
        c[0] = other
        return c

    def __add__(self, other):
        return Taylor(self.space, self.coeffs + self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Taylor(self.space, self.coeffs - self._lift(other))

    def __rsub__(self, other):
        return Taylor(self.space, self._lift(other) - self.coeffs)

    def __neg__(self):
        return Taylor(self.space, -self.coeffs)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Taylor):
            return Taylor(self.space, self.space.mul(self.coeffs, other.coeffs))
        return Taylor(self.space, self.coeffs * np.asarray(other, dtype=float))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Taylor):
            return self * other.reciprocal()
        return Taylor(self.space, self.coeffs / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, Taylor):
            return (p * self.log()).exp()
        if float(p) == int(p) and int(p) >= 0:
            return self._ipow(int(p))
        return self._compose(_pow_coeffs(float(p)))

    def __rpow__(self, base):
        return (self * math.log(base)).exp()

    def _ipow(self, p):
        result = Taylor.constant(self.space, np.ones(self.coeffs.shape[1:]))
        base = self
        while p:
            if p & 1:
                result = result * base
            p >>= 1
            if p:
                base = base * base
        return result

    def _compose(self, coeff_fn):
        """f(self) where ``coeff_fn(x0, K)`` gives f^(k)(x0)/k!, k=0..K."""
        x0 = self.coeffs[0]
        K = self.space.order
        fk = coeff_fn(x0, K)
        h = Taylor(self.space, self.coeffs.copy())
        h.coeffs[0] = 0.0
        out = Taylor.constant(self.space, fk[K])
        # Horner in the nilpotent part h
        for k in range(K - 1, -1, -1):
            out = out * h + fk[k]
        return out

    def reciprocal(self):
        return self._compose(_pow_coeffs(-1.0))

    def exp(self):
        return self._compose(_exp_coeffs)

    def sin(self):
        return self._compose(_sin_coeffs)

    def cos(self):
        return self._compose(_cos_coeffs)

    def tanh(self):
        return self._compose(_tanh_coeffs)

    def log(self):
        return self._compose(_log_coeffs)

    def sqrt(self):
        return self._compose(_pow_coeffs(0.5))


def _exp_coeffs(x0, K):
    e = np.exp(x0)
    return [e / math.factorial(k) for k in range(K + 1)]


def _sin_coeffs(x0, K):
    cyc = [np.sin(x0), np.cos(x0), -np.sin(x0), -np.cos(x0)]
    return [cyc[k % 4] / math.factorial(k) for k in range(K + 1)]


def _cos_coeffs(x0, K):
    cyc = [np.cos(x0), -np.sin(x0), -np.cos(x0), np.sin(x0)]
    return [cyc[k % 4] / math.factorial(k) for k in range(K + 1)]


def _tanh_coeffs(x0, K):
    # t' = 1 - t^2, solved as a power series in the offset
    t = [np.tanh(x0)]
    for k in range(K):
        sq = sum(t[i] * t[k - i] for i in range(k + 1))
        rhs = (1.0 - sq) if k == 0 else -sq
        t.append(rhs / (k + 1))
    return t


def _log_coeffs(x0, K):
    out = [np.log(x0)]
    for k in range(1, K + 1):
        out.append((-1) ** (k + 1) / (k * x0 ** k))
    return out


def _pow_coeffs(p):
    def coeffs(x0, K):
        out = []
        binom = 1.0
        for k in range(K + 1):
            out.append(binom * x0 ** (p - k))
            binom *= (p - k) / (k + 1)
        return out
    return coeffs


def _dispatch(name, npfun):
    def f(x):
        if isinstance(x, Taylor):
            return getattr(x, name)()
        return npfun(x)
    f.__name__ = name
    return f


FUNCTIONS = {
    "exp": _dispatch("exp", np.exp),
    "sin": _dispatch("sin", np.sin),
    "cos": _dispatch("cos", np.cos),
    "tanh": _dispatch("tanh", np.tanh),
    "log": _dispatch("log", np.log),
    "sqrt": _dispatch("sqrt", np.sqrt),
}
CONSTANTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


class Expression:
    """A compiled scalar expression in ``mu`` and ``eta1..etan``."""

    def __init__(self, source, dim):
        self.source = str(source).strip()
        self.dim = int(dim)
        tree = ast.parse(self.source, mode="eval")
        self.names = set()
        self._fn = self._compile(tree.body)

    def __repr__(self):
        return f"Expression({self.source!r})"

    @property
    def uses_mu(self):
        return "mu" in self.names

    @property
    def uses_eta(self):
        return any(n.startswith("eta") for n in self.names)

    def _compile(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            v = float(node.value)
            return lambda env: v
        if isinstance(node, ast.Name):
            name = node.id
            if name in CONSTANTS:
                v = CONSTANTS[name]
                return lambda env: v
            if name == "mu" or name == "etasq" or (
                    name.startswith("eta") and name[3:].isdigit()
                    and 1 <= int(name[3:]) <= self.dim):
                self.names.add(name)
                return lambda env: env[name]
            raise ValueError(f"unknown name {name!r} in expression {self.source!r}")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self._compile(node.left), self._compile(node.right)
            if isinstance(node.op, ast.Pow) and isinstance(node.right, ast.Constant):
                p = node.right.value
                return lambda env: _power(left(env), p)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: -inner(env)
            return inner
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in FUNCTIONS and len(node.args) == 1 and not node.keywords):
            fn = FUNCTIONS[node.func.id]
            arg = self._compile(node.args[0])
            return lambda env: fn(arg(env))
        raise ValueError(f"unsupported construct {ast.dump(node)} in {self.source!r}")

    def __call__(self, mu, eta):
        """Evaluate; ``eta`` is a sequence of ``dim`` components."""
        env = {"mu": mu}
        for i in range(self.dim):
            env[f"eta{i + 1}"] = eta[i]
        if "etasq" in self.names:
            sq = eta[0] * eta[0]
            for i in range(1, self.dim):
                sq = sq + eta[i] * eta[i]
            env["etasq"] = sq
        return self._fn(env)


def _power(x, p):
    if isinstance(x, Taylor):
        return x ** p
    return np.power(x, float(p)) if not float(p).is_integer() else x ** int(p)


def parse_expression(source, dim):
    if isinstance(source, Expression):
        return source
    if isinstance(source, (int, float)):
        source = repr(float(source))
    return Expression(source, dim)
