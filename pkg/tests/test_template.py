import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptloop import template as tp
from conceptloop.geometry import BoxN

WORDS = ["red", "disc", "blue", "square", "odd", "one", "the", "shape", "moved", "big"]


def random_box(rng):
    x = np.sort(rng.random(2))
    y = np.sort(rng.random(2))
    return BoxN(x[0], y[0], x[1], y[1])


def random_response(rng):
    text = lambda n: " ".join(rng.choice(WORDS, n))
    return tp.StructuredResponse(
        think=text(rng.integers(0, 8)), rule=text(rng.integers(0, 5)),
        check=random_box(rng), bbox=random_box(rng),
        answer=text(rng.integers(1, 4)))


def close(a, b):
    return (a.think == b.think and a.rule == b.rule and a.answer == b.answer
            and np.allclose(a.check.as_tuple(), b.check.as_tuple(), atol=1e-4)
            and np.allclose(a.bbox.as_tuple(), b.bbox.as_tuple(), atol=1e-4))


VALID = tp.serialize(tp.StructuredResponse(
    "look at support", "same color", BoxN(0, 0, 0.5, 0.5), BoxN(0.5, 0.5, 1, 1), "red disc"))


def test_check_box_format():
    r = tp.StructuredResponse("", "", BoxN(0, 0, 0.5, 0.5), BoxN(0, 0, 1, 1), "red disc")
    s = tp.serialize(r)
    assert "<check>[0.0000, 0.0000, 0.5000, 0.5000]</check>" in s
    assert "<answer>red disc</answer>" in s
    assert tp.parse(s).response == r


def test_thousand_random_round_trips():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = random_response(rng)
        out = tp.parse(tp.serialize(r))
        assert out.ok and out.error is None and close(out.response, r)


@pytest.mark.parametrize("text, code", [
    ("", tp.ParseError.MissingTag),
    (VALID.replace("<rule>", "", 1), tp.ParseError.MissingTag),
    (VALID.replace("</think>", "</think></think>", 1), tp.ParseError.DuplicateTag),
    (VALID.replace("<think>look at support</think> <rule>same color</rule>",
                   "<rule>same color</rule> <think>look at support</think>"), tp.ParseError.BadOrder),
    (VALID.replace("[0.0000, 0.0000, 0.5000, 0.5000]", "[0.9, 0.1, 0.2, 0.3]"), tp.ParseError.BadBox),
    (VALID.replace("[0.0000, 0.0000, 0.5000, 0.5000]", "[0.1, 0.1, 0.2]"), tp.ParseError.BadBox),
    (VALID.replace("red disc", "the big red disc"), tp.ParseError.BadAnswer),
    (VALID.replace("red disc", "  "), tp.ParseError.BadAnswer),
    (VALID + " trailing", tp.ParseError.TrailingGarbage),
    ("junk " + VALID, tp.ParseError.TrailingGarbage),
    (VALID.replace("</rule> <check>", "</rule> x <check>"), tp.ParseError.TrailingGarbage),
])
def test_specific_error_codes(text, code):
    out = tp.parse(text)
    assert out.response is None and out.error is code
    assert tp.format_reward(text) == 0


def _mutations(valid, rng):
    """One-edit mutations, one generator per error code."""
    tags = [t for name in tp.TAGS for t in (f"<{name}>", f"</{name}>")]
    tag = lambda: tags[rng.integers(len(tags))]
    yield lambda s: s.replace(tag(), "", 1)
    yield lambda s: s.replace((t := tag()), t + t, 1)
    yield lambda s: (lambda i: s.replace(f"<{tp.TAGS[i]}>", "@@", 1)
                     .replace(f"<{tp.TAGS[i + 1]}>", f"<{tp.TAGS[i]}>", 1)
                     .replace("@@", f"<{tp.TAGS[i + 1]}>", 1))(rng.integers(len(tp.TAGS) - 1))
    yield lambda s: s.replace("<bbox>[", "<bbox>[" + str(rng.integers(2, 9)), 1)
    yield lambda s: s.replace("<answer>", "<answer>" + "w " * int(rng.integers(3, 6)), 1)
    yield lambda s: s + " " + "xyz"[: rng.integers(1, 4)]


def test_mutation_fuzz_reaches_every_code():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(300):
        valid = tp.serialize(random_response(rng))
        for mutate in _mutations(valid, rng):
            bad = mutate(valid)
            out = tp.parse(bad)
            assert not out.ok and out.error is not None
            assert tp.format_reward(bad) == 0
            seen.add(out.error)
    assert seen == set(tp.ParseError)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=120))
def test_parse_never_raises_and_reward_is_consistent(text):
    out = tp.parse(text)
    assert (out.response is None) != (out.error is None)
    assert tp.format_reward(text) == int(out.ok) == tp.format_reward(text)


def test_whitespace_between_tags_is_accepted():
    spaced = VALID.replace("> <", ">\n\t <")
    assert tp.parse(spaced).ok


def test_invalid_responses_are_rejected_at_construction():
    with pytest.raises(ValueError):
        tp.StructuredResponse("", "", BoxN(0, 0, 1, 1), BoxN(0, 0, 1, 1), "one two three four")
    with pytest.raises(ValueError):
        tp.StructuredResponse("<rule>", "", BoxN(0, 0, 1, 1), BoxN(0, 0, 1, 1), "a")


def test_versioned_prompt_fixture():
    text = tp.system_prompt()
    assert "{problem}" in text
    rendered = tp.render_prompt("find the odd one", [BoxN(0, 0, 0.5, 0.5)])
    assert "find the odd one" in rendered and "[0.0000, 0.0000, 0.5000, 0.5000]" in rendered
