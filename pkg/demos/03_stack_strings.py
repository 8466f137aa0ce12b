"""Recover strings that only exist after the code runs.

Decoder loops and byte-by-byte stack writes hide names from a plain scan. The
small interpreter runs the function, then printable runs in written memory are
attributed back to the block that wrote their last byte.
"""

from _paths import FIXTURES

from tadaspot.disasm import function_cfg
from tadaspot.features.strings import emulate_for_strings, should_emulate
from tadaspot.loader import load_path

for name in ["tool_xor_decoded_name", "vm_add_rotate_decoded", "sbx_stack_string_module",
             "sbx_encoded_stack_string", "benign_sum_loop"]:
    image = load_path(FIXTURES / f"{name}.fixture")
    cfg = function_cfg(image, image.entry_point)
    triggered, reason = should_emulate(cfg, image)
    print(f"{name}: trigger={reason.value}")
    if not triggered:
        continue
    result = emulate_for_strings(cfg, image)
    for found in result:
        print(f"  {found.value!r} ({found.encoding.value}) at {found.address:#x}, "
              f"block {found.attributed_block[1]:#x}, {result.steps} steps")
