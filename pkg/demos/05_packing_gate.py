"""Show the packing gate that runs before any block is analyzed.

A normal program links many functions from several libraries. A packed one
usually imports a handful, enough to unpack itself. Only the import table
changes between the two images built here.
"""

from dataclasses import replace

from _paths import FIXTURES

from tadaspot.loader import FormatKind, ImportEntry, ImportTable, detect_packing, load_path
from tadaspot.report import analyze_image


def with_imports(image, n_libs, n_funcs):
    entries = tuple(ImportEntry(f"lib{i % n_libs}.dll", f"Func{i}", 0x403000 + 4 * i) for i in range(n_funcs))
    return replace(image, format_kind=FormatKind.PE32, imports=ImportTable(entries))


base = load_path(FIXTURES / "vm_cpuid_hypervisor_bit.fixture")
for libs, funcs in [(2, 6), (4, 40), (8, 14), (5, 15), (12, 120)]:
    image = with_imports(base, libs, funcs)
    verdict = detect_packing(image)
    report = analyze_image(image, name=f"{libs} libs / {funcs} funcs")
    print(f"{report.input_name:<20} verdict={verdict.verdict.value:<16} status={report.status:<7} "
          f"positives={[hex(p) for p in report.positives]}")
