"""Random affine equation systems and an evaluator that shares nothing with the solver.

``random_system`` grows an expression DAG of COPY/INT_ADD nodes over one
free literal slot, some pinned slots and constants, evaluates it at a random
secret slot value, and uses the result as the required target.  Every system
is therefore solvable by construction; the solver may return a different
slot value (even coefficients have several roots), which is fine as long as
``check`` accepts it.
"""

from __future__ import annotations

import random

from ..slicer import Const, EquationSystem, Op, SliceStmt, Slot, Var, build_equations

REGS = ("r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r12")


def reval(sys: EquationSystem, assignment: dict) -> int:
    """Evaluate ``sys.target`` by recursive descent from the target.

    Unlike the solver's forward pass this walks definitions on demand and
    wraps only once at the end.
    """
    defs = {op.dst: op for op in sys.equations}
    memo: dict = {}

    def value(x) -> int:
        if isinstance(x, Const):
            return x.value
        if isinstance(x, Slot):
            return assignment[x] if x in assignment else x.value
        if x not in memo:
            op = defs[x]
            memo[x] = sum(value(a) for a in op.args) if op.opcode == "INT_ADD" else value(op.args[0])
        return memo[x]

    return value(sys.target) % (1 << 32)


def check(sys: EquationSystem, assignment: dict) -> bool:
    return reval(sys, assignment) == sys.required % (1 << 32)


def random_system(rng: random.Random, max_depth: int = 6) -> tuple[EquationSystem, int]:
    """Returns the system and the secret slot value used to derive ``required``."""
    depth = rng.randint(1, max_depth)
    free = Slot(ins_addr=0x1000 + 2 * rng.randrange(512), orig_addr=0x2000 + 4 * rng.randrange(256),
                value=rng.getrandbits(32), free=True)
    use_free = rng.random() < 0.9
    versions: dict[str, int] = {}
    ops: list[Op] = []
    made: list[Var] = []

    def fresh() -> Var:
        name = rng.choice(REGS)
        versions[name] = versions.get(name, 0) + 1
        return Var(name, versions[name])

    def leaf():
        k = rng.random()
        if use_free and k < 0.45:
            return free
        if k < 0.6:
            return Slot(0x1000 + 2 * rng.randrange(512), 0x3000 + 4 * rng.randrange(256),
                        rng.getrandbits(32), free=False)
        if made and k < 0.8:
            return rng.choice(made)  # sharing makes even coefficients
        return Const(rng.choice([4, 8, rng.getrandbits(12), rng.getrandbits(32)]))

    def node(d: int):
        if d == 0:
            return leaf()
        if rng.random() < 0.3:
            args = (node(d - 1),)
            opcode = "COPY"
        else:
            args = (node(d - 1), node(rng.randrange(d)))
            opcode = "INT_ADD"
        v = fresh()
        ops.append(Op(v, opcode, args))
        made.append(v)
        return v

    top = node(depth)
    if not isinstance(top, Var):
        v = fresh()
        ops.append(Op(v, "COPY", (top,)))
        top = v
    if use_free and not any(free in op.args for op in ops):
        v = fresh()
        ops.append(Op(v, "INT_ADD", (top, free)))
        top = v
    secret = rng.getrandbits(32)
    draft = EquationSystem(ops, top, 0, [])
    required = reval(draft, {free: secret})
    # route through build_equations in shuffled order so the topological sort is exercised
    stmts = [SliceStmt(None, [op]) for op in ops]
    rng.shuffle(stmts)
    return build_equations(stmts, top, required), secret
