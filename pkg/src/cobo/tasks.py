"""Desk-scale black-box objectives over fixed-length token sequences.

Two tasks are registered:

``arith``
    Fit the target ``1/3 + x + sin(x*x)`` on the grid ``x = -2, -1.9, ..., 2``.
    A sequence is read as an infix expression after dropping pad tokens and
    scored with ``log(1 + MSE)``, capped at ``PENALTY``. Sequences that do not
    parse, or that evaluate to a non-finite value anywhere on the grid, score
    ``PENALTY``. The task is minimized.

    Grammar (recursive descent, usual precedence)::

        expr   := term ('+' term)*
        term   := factor (('*' | '/') factor)*
        factor := 'x' | '1' | '2' | '3' | 'sin' '(' expr ')' | '(' expr ')'

``bitstring``
    20 binary tokens scored by two exponential bumps around hidden patterns
    derived from the task seed. Maximized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PENALTY = 10.0
ARITH_TOKENS = ("<pad>", "x", "+", "*", "sin", "1", "2", "3", "/", "(", ")")
ARITH_TARGET = ("1", "/", "3", "+", "x", "+", "sin", "(", "x", "*", "x", ")")
ARITH_GRID = np.linspace(-2.0, 2.0, 41)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    pad: int = 0

    def __post_init__(self):
        if not 0 <= self.pad < len(self.tokens):
            raise ValueError(f"pad index {self.pad} outside vocabulary of size {len(self.tokens)}")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens) -> np.ndarray:
        index = {t: i for i, t in enumerate(self.tokens)}
        return np.array([index[t] for t in tokens], dtype=np.int64)

    def decode(self, seq) -> list[str]:
        return [self.tokens[int(i)] for i in seq]


@dataclass
class Task:
    name: str
    vocab: Vocab
    seq_len: int
    direction: str  # "maximize" | "minimize"
    oracle: Callable[[np.ndarray], float]
    sampler: Callable[[np.random.Generator], np.ndarray]
    info: dict = field(default_factory=dict)
    canonical: Callable[[np.ndarray], np.ndarray] | None = None  # representative of x's equivalence class

    def check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.shape != (self.seq_len,):
            raise ValueError(f"{self.name}: expected a sequence of length {self.seq_len}, got shape {x.shape}")
        if x.min() < 0 or x.max() >= len(self.vocab):
            raise ValueError(f"{self.name}: token index outside [0, {len(self.vocab)})")
        return x

    def canonicalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        return x if self.canonical is None else self.canonical(x)

    def evaluate(self, x) -> float:
        return float(self.oracle(self.check(x)))

    def normalize(self, value: float) -> float:
        """Sign convention used everywhere downstream: larger is better."""
        return -value if self.direction == "minimize" else value

    def corpus(self, size: int, rng: np.random.Generator, max_tries: int | None = None) -> list[np.ndarray]:
        """Up to ``size`` distinct random valid sequences."""
        if size < 1:
            raise ValueError("corpus size must be >= 1")
        seen, out = set(), []
        tries = max_tries or 50 * size
        for _ in range(tries):
            x = self.sampler(rng)
            key = x.tobytes()
            if key in seen:
                continue
            seen.add(key)
            out.append(x)
            if len(out) == size:
                break
        return out


# --- arithmetic expressions ---------------------------------------------------

class _ParseError(Exception):
    pass


class _Parser:
    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise _ParseError(f"expected {expected!r} at {self.pos}, found {tok!r}")
        self.pos += 1
        return tok

    def parse(self):
        fn = self.expr()
        if self.pos != len(self.toks):
            raise _ParseError(f"trailing tokens from position {self.pos}")
        return fn

    def expr(self):
        fn = self.term()
        while self.peek() == "+":
            self.take()
            lhs, rhs = fn, self.term()
            fn = lambda x, a=lhs, b=rhs: a(x) + b(x)
        return fn

    def term(self):
        fn = self.factor()
        while self.peek() in ("*", "/"):
            op = self.take()
            lhs, rhs = fn, self.factor()
            if op == "*":
                fn = lambda x, a=lhs, b=rhs: a(x) * b(x)
            else:
                fn = lambda x, a=lhs, b=rhs: a(x) / b(x)
        return fn

    def factor(self):
        tok = self.take()
        if tok == "x":
            return lambda x: x
        if tok in ("1", "2", "3"):
            c = float(tok)
            return lambda x: np.full_like(x, c)
        if tok == "sin":
            self.take("(")
            inner = self.expr()
            self.take(")")
            return lambda x: np.sin(inner(x))
        if tok == "(":
            inner = self.expr()
            self.take(")")
            return inner
        raise _ParseError(f"unexpected token {tok!r}")


def parse_expression(tokens: list[str]):
    """Compile an infix token list into a vectorized function, or None if malformed."""
    try:
        return _Parser([t for t in tokens if t != "<pad>"]).parse()
    except _ParseError:
        return None


def arith_target(x: np.ndarray) -> np.ndarray:
    return 1.0 / 3.0 + x + np.sin(x * x)


ARITH_VOCAB = Vocab(ARITH_TOKENS, pad=0)


def arith_oracle(x) -> float:
    fn = parse_expression(ARITH_VOCAB.decode(x))
    if fn is None:
        return PENALTY
    with np.errstate(all="ignore"):
        values = fn(ARITH_GRID)
        if not np.all(np.isfinite(values)):
            return PENALTY
        mse = float(np.mean((values - arith_target(ARITH_GRID)) ** 2))
    if not np.isfinite(mse):
        return PENALTY
    return min(float(np.log1p(mse)), PENALTY)


def _random_expr(rng: np.random.Generator, depth: int) -> list[str]:
    """Random derivation from the expression grammar."""
    def factor(d):
        r = rng.random()
        if d <= 0 or r < 0.55:
            return [str(rng.choice(["x", "x", "1", "2", "3"]))]
        if r < 0.8:
            return ["sin", "("] + expr(d - 1) + [")"]
        return ["("] + expr(d - 1) + [")"]

    def term(d):
        out = factor(d)
        while rng.random() < 0.3:
            if rng.random() < 0.7:
                out += ["*"] + factor(d)
            else:
                # constant divisors only: the grid contains x = 0
                out += ["/", str(rng.choice(["1", "2", "3"]))]
        return out

    def expr(d):
        out = term(d)
        while rng.random() < 0.4:
            out += ["+"] + term(d)
        return out

    return expr(depth)


def arith_canonical(x) -> np.ndarray:
    """Pads are ignored by the parser, so move them all to the end."""
    x = np.asarray(x, dtype=np.int64)
    body = x[x != ARITH_VOCAB.pad]
    return np.concatenate([body, np.full(len(x) - len(body), ARITH_VOCAB.pad, dtype=np.int64)])


def arith_sampler(rng: np.random.Generator, seq_len: int = 12) -> np.ndarray:
    while True:
        toks = _random_expr(rng, depth=2)
        if len(toks) <= seq_len:
            return ARITH_VOCAB.encode(toks + ["<pad>"] * (seq_len - len(toks)))


def make_arith(seed: int = 0) -> Task:
    return Task("arith", ARITH_VOCAB, 12, "minimize", arith_oracle, arith_sampler,
                info={"target": " ".join(ARITH_TARGET)}, canonical=arith_canonical)


# --- bitstring ----------------------------------------------------------------

BIT_LEN = 20
BIT_VOCAB = Vocab(("0", "1"), pad=0)


def bitstring_patterns(seed: int = 0, flips: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Hidden optimum b* and secondary bump centre b°, which differs from b* in ``flips`` bits."""
    rng = np.random.default_rng([seed, 0xB175])
    b_star = rng.integers(0, 2, BIT_LEN)
    b_alt = b_star.copy()
    b_alt[rng.choice(BIT_LEN, flips, replace=False)] ^= 1
    return b_star, b_alt


def bitstring_value(x, b_star, b_alt) -> float:
    x = np.asarray(x)
    return float(np.exp(-np.abs(x - b_star).sum() / 5.0) + 0.3 * np.exp(-np.abs(x - b_alt).sum() / 3.0))


def make_bitstring(seed: int = 0) -> Task:
    b_star, b_alt = bitstring_patterns(seed)

    def oracle(x):
        return bitstring_value(x, b_star, b_alt)

    def sampler(rng):
        return rng.integers(0, 2, BIT_LEN).astype(np.int64)

    best = 1.0 + 0.3 * np.exp(-np.abs(b_star - b_alt).sum() / 3.0)
    return Task("bitstring", BIT_VOCAB, BIT_LEN, "maximize", oracle, sampler,
                info={"b_star": b_star.tolist(), "b_alt": b_alt.tolist(), "global_max": float(best)})


TASKS = {"arith": make_arith, "bitstring": make_bitstring}


def get_task(name: str, seed: int = 0) -> Task:
    try:
        return TASKS[name](seed)
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
