"""Print the feature lines extracted for every block of a few samples.

Each sample shows a different extractor: an uncommon instruction, a PEB read
through fs, an API call with a recovered string argument, and an API reached
through a register loaded from the import table.
"""

from _paths import FIXTURES

from tadaspot.disasm import discover_functions, function_cfg
from tadaspot.features.api import api_features
from tadaspot.features.asm import asm_features
from tadaspot.features.strings import string_features
from tadaspot.loader import load_path

SAMPLES = ["vm_cpuid_hypervisor_bit", "dbg_peb_flags", "vm_vbox_registry_key", "dbg_checkremote_indirect"]

for name in SAMPLES:
    image = load_path(FIXTURES / f"{name}.fixture")
    print(f"== {name}")
    for entry in discover_functions(image):
        cfg = function_cfg(image, entry)
        strings, apis = string_features(cfg, image), api_features(cfg, image)
        for block in cfg:
            lines = [f.text for f in asm_features(block) + strings[block.start] + apis[block.start]]
            for line in lines:
                print(f"  {block.start:#x}  {line}")
    print()
