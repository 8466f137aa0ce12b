"""Render prompts and rate them with the built-in rule rater or a custom one.

Any object with a ``backend_id`` and a ``complete(prompt_text) -> str`` method
can stand in for the model. Here a keyword backend replies with free text to
show that the reply parser pulls out the first in-range integer.
"""

from tadaspot.rating import LocalRuleBackend, RatingConfig, build_prompt, rate

prompts = {
    "cpuid": ["Uncommon INS: cpuid (Processor information)"],
    "debugger api": ["Called API: IsDebuggerPresent()"],
    "greeting": ['String Reference: "Hello, world"', 'Called API: MessageBoxA(0, "Hello, world", "Hi", 0)'],
}


class KeywordBackend:
    backend_id = "keyword"

    def complete(self, prompt_text: str) -> str:
        features = [line for line in prompt_text.splitlines() if line.startswith("- ")]
        hit = any(k in line.lower() for line in features for k in ("debugger", "cpuid"))
        return "I would rate this 8 out of 10." if hit else "Rating: 2"


print(build_prompt(prompts["cpuid"]).rendered)
strict = RatingConfig(threshold=8)
for label, lines in prompts.items():
    prompt = build_prompt(lines)
    local = rate(prompt, LocalRuleBackend())
    keyword = rate(prompt, KeywordBackend(), config=strict)
    print(f"{label:<13} local={local.rating:>2} positive={local.positive!s:<5} "
          f"keyword={keyword.rating:>2} positive@8={keyword.positive}")
