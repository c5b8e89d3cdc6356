"""Run ledger: per-evaluation CSV rows, written losslessly.

Floats are serialized with 17 significant digits so reading the file back
reproduces the in-memory values bit for bit (including inf for the
non-private epsilon sentinel).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

HEADER = "step,alpha_star,rdp_eps,epsilon,delta,critic_loss,gen_loss,is_mean,is_std,wall_s"


@dataclass(frozen=True)
class LedgerRow:
    step: int
    alpha_star: int
    rdp_eps: float
    epsilon: float
    delta: float
    critic_loss: float
    gen_loss: float
    is_mean: float
    is_std: float
    wall_s: float


def _fmt(x: float) -> str:
    return f"{x:.17g}"


class RunLedger:
    """Ordered ledger rows with the monotonicity the run must obey."""

    def __init__(self):
        self.rows: list[LedgerRow] = []

    def append(self, row: LedgerRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if row.step <= last.step:
                raise ValueError(
                    f"ledger steps must increase: {row.step} after {last.step}"
                )
            if not (row.epsilon >= last.epsilon):
                raise ValueError(
                    f"epsilon must be non-decreasing: {row.epsilon} after {last.epsilon}"
                )
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = [HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        str(r.step),
                        str(r.alpha_star),
                        _fmt(r.rdp_eps),
                        _fmt(r.epsilon),
                        _fmt(r.delta),
                        _fmt(r.critic_loss),
                        _fmt(r.gen_loss),
                        _fmt(r.is_mean),
                        _fmt(r.is_std),
                        _fmt(r.wall_s),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> "RunLedger":
        text = Path(path).read_text()
        lines = [ln for ln in text.splitlines() if ln]
        if not lines or lines[0] != HEADER:
            raise ValueError(f"{path}: missing or wrong ledger header")
        out = cls()
        names = [f.name for f in fields(LedgerRow)]
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(names):
                raise ValueError(f"{path}: row has {len(parts)} fields, expected {len(names)}")
            out.append(
                LedgerRow(
                    step=int(parts[0]),
                    alpha_star=int(parts[1]),
                    rdp_eps=float(parts[2]),
                    epsilon=float(parts[3]),
                    delta=float(parts[4]),
                    critic_loss=float(parts[5]),
                    gen_loss=float(parts[6]),
                    is_mean=float(parts[7]),
                    is_std=float(parts[8]),
                    wall_s=float(parts[9]),
                )
            )
        return out
