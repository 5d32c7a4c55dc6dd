import numpy as np
import pytest

from molbo.chem import BondOrder

CORPUS = """
CCO CC(=O)O CCN CCCCO c1ccccc1 Cc1ccccc1 Oc1ccccc1 Nc1ccccc1 c1ccncc1 c1ccoc1 c1ccsc1
CC(=O)Oc1ccccc1C(=O)O CC(C)Cc1ccc(cc1)C(C)C(=O)O CN1C=NC2=C1C(=O)N(C(=O)N2C)C
CC(=O)Nc1ccc(O)cc1 OC(=O)c1ccccc1O O=C(O)CCC(=O)O NCC(=O)O CC(N)C(=O)O OCC(O)CO C1CCCCC1
C1CCOC1 C1CCNCC1 O=C1CCCCC1 CC(C)=O CCOC(C)=O ClCCl FC(F)(F)c1ccccc1 Brc1ccccc1
Ic1ccccc1 N#Cc1ccccc1 O=[N+]([O-])c1ccccc1 CS(C)=O CCS CCSCC c1ccc2ccccc2c1
c1ccc2[nH]ccc2c1 c1cnc[nH]1 c1ccc(cc1)-c1ccccc1 CC(C)(C)O COc1ccccc1 CC#N C#CC C=CC=C
CCCCCCCC OCCO NC(N)=O O=C(O)C(F)(F)F CCOCC c1ccc(O)cc1O c1cc(N)ccc1C(=O)O
CC(C)NCC(O)c1ccc(O)c(O)c1 OC(=O)CC(O)(CC(=O)O)C(=O)O CC1=CC(=O)C=CC1=O C[NH3+] CC(=O)[O-]
C1CC2CCC1C2 c1ccc2c(c1)ccc1ccccc12 OC1CCCCC1O
""".split()


def _atom_text(atom):
    sym = atom.element.lower() if atom.aromatic else atom.element
    if not atom.bracket:
        return sym
    h = "" if atom.hydrogens == 0 else ("H" if atom.hydrogens == 1 else f"H{atom.hydrogens}")
    q = atom.charge
    charge = "" if q == 0 else ("+" if q == 1 else "-" if q == -1 else f"{q:+d}")
    return f"[{sym}{h}{charge}]"


def _bond_text(g, a, b, order):
    if order == BondOrder.DOUBLE:
        return "="
    if order == BondOrder.TRIPLE:
        return "#"
    if order == BondOrder.SINGLE and g.atoms[a].aromatic and g.atoms[b].aromatic:
        return "-"
    return ""


def random_smiles(g, rng):
    """An equivalent SMILES string with a random start atom and branch order."""
    adj = g.neighbors()
    order = {}
    children = {}
    closures = {}  # opener atom -> list of (closer atom, bond order)
    used = set()

    def visit(u, parent):
        order[u] = len(order)
        children[u] = []
        nbrs = list(adj[u])
        rng.shuffle(nbrs)
        for v, bo in nbrs:
            edge = (min(u, v), max(u, v))
            if v == parent or edge in used:
                continue
            used.add(edge)
            if v in order:
                closures.setdefault(v, []).append((u, bo))
            else:
                children[u].append((v, bo))
                visit(v, u)

    start = int(rng.integers(g.num_atoms))
    visit(start, -1)

    free = list(range(1, 100))
    pending = {}  # closer atom -> list of (digit)

    def ring_label(d):
        return str(d) if d < 10 else f"%{d}"

    def write(u):
        out = [_atom_text(g.atoms[u])]
        for v, bo in closures.get(u, []):
            d = free.pop(0)
            out.append(_bond_text(g, u, v, bo) + ring_label(d))
            pending.setdefault(v, []).append(d)
        for d in pending.pop(u, []):
            out.append(ring_label(d))
            free.insert(0, d)
            free.sort()
        kids = children[u]
        for k, (v, bo) in enumerate(kids):
            text = _bond_text(g, u, v, bo) + write(v)
            out.append(text if k == len(kids) - 1 else f"({text})")
        return "".join(out)

    return write(start)


@pytest.fixture(scope="session")
def corpus():
    return list(CORPUS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
