"""Walk a hand-built sample from bytes to basic blocks.

The cpuid fixture checks the hypervisor bit and branches on it, which gives
a small diamond: one block that runs cpuid and two arms that set the result.
"""

from _paths import FIXTURES

from tadaspot.disasm import discover_functions, function_cfg
from tadaspot.loader import load_path

image = load_path(FIXTURES / "vm_cpuid_hypervisor_bit.fixture")
print(f"format={image.format_kind.value} entry={image.entry_point:#x}")
for section in image.sections:
    print(f"  section {section.name:<8} {section.virtual_address:#x}..{section.end:#x} {sorted(section.flags)}")

for entry in discover_functions(image):
    cfg = function_cfg(image, entry)
    print(f"\nfunction {entry:#x}: {len(cfg.blocks)} blocks")
    for block in cfg:
        succ = ", ".join(f"{s:#x}" for s in block.successors) or "(exit)"
        print(f"  block {block.start:#x} -> {succ}")
        for insn in block.instructions:
            print(f"      {insn.address:#x}  {insn.mnemonic} {insn.op_str}")
