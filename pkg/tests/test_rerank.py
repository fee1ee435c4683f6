import json
from pathlib import Path

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from auditmatch.corpus import Requirement
from auditmatch.rerank import (
    DUPLICATES_REMOVED,
    FOREIGN_IDS_DROPPED,
    PADDED_FROM_RETRIEVER,
    PARSE_FALLBACK,
    SYSTEM_TEXT,
    TEMPLATES,
    CandidateSet,
    OracleChatClient,
    ParseError,
    PromptTemplate,
    RemoteChatClient,
    RerankError,
    ScriptedChatClient,
    TemplateError,
    get_template,
    parse_closed_response,
    parse_open_response,
    render_prompt,
    repair_selection,
    rerank,
    to_messages,
)

GOLDEN = Path(__file__).parent / "golden"
REPLY_EXAMPLE = "['1129', '1139','1159', '1161', '829']"


def golden_candidates():
    req = json.loads((GOLDEN / "requirements.jsonl").read_text().splitlines()[0])
    cands = [json.loads(line) for line in (GOLDEN / "candidates.jsonl").read_text().splitlines()]
    return CandidateSet(
        Requirement(req["id"], req["standard_ref"], req["text"]),
        [(c["segment_id"], c["text"]) for c in cands],
    )


def fifteen(req_text="Disclose the lease terms."):
    return CandidateSet(
        Requirement("r1", "IFRS 16.59", req_text),
        [(f"c{i}", f"segment text {i}") for i in range(1, 16)],
    )


class TestTemplates:
    @pytest.mark.parametrize("tid", "ABCD")
    def test_golden_render(self, tid):
        expected = (GOLDEN / f"prompt_{tid}.txt").read_text(encoding="utf-8")
        assert render_prompt(TEMPLATES[tid], golden_candidates()) == expected

    def test_a_starts_with_question_and_lists_candidates(self):
        cs = CandidateSet(Requirement("r", "x", "Disclose X"), [("7", "first"), ("9", "second")])
        out = render_prompt(TEMPLATES["A"], cs)
        assert out.startswith(
            "Out of all document segments provided below which ones are the 5 most relevant "
            "for fulfilling the IFRS requirement? IFRS requirement: Disclose X document segments: "
        )
        assert "[7] first" in out and "[9] second" in out
        assert out.endswith("Do not add any additional text.")

    def test_bracketed_differences(self):
        a, b = TEMPLATES["A"].body, TEMPLATES["B"].body
        assert b == f"System: {SYSTEM_TEXT} " + a.replace("IFRS requirement: {", "Think step by step. IFRS requirement: {")
        c, d = TEMPLATES["C"].body, TEMPLATES["D"].body
        assert "Each should only be a sentence long." in d
        assert "Each should only be a sentence long." not in c
        assert d.replace("Each should only be a sentence long. ", "") == c
        assert "json schema" in c

    def test_formats(self):
        assert [TEMPLATES[t].output_format for t in "ABCD"] == ["closed", "closed", "open", "open"]

    def test_render_is_pure(self):
        cs = fifteen()
        assert render_prompt(TEMPLATES["C"], cs) == render_prompt(TEMPLATES["C"], cs)

    def test_placeholder_text_in_values_left_alone(self):
        cs = CandidateSet(Requirement("r", "x", "mentions {document} literally"), [("1", "has {requirement}")])
        out = render_prompt(TEMPLATES["A"], cs)
        assert "mentions {document} literally" in out
        assert "[1] has {requirement}" in out

    def test_template_validation(self):
        with pytest.raises(TemplateError):
            PromptTemplate("X", "closed", "no placeholders")
        with pytest.raises(TemplateError):
            PromptTemplate("X", "closed", "{requirement} {document} {document}")
        with pytest.raises(TemplateError, match="'E'"):
            get_template("E")

    def test_system_message_split(self):
        prompt = render_prompt(TEMPLATES["B"], fifteen())
        msgs = to_messages(prompt)
        assert msgs[0] == {"role": "system", "content": SYSTEM_TEXT}
        assert msgs[1]["content"].startswith("Out of all document segments")
        assert to_messages(prompt, supports_roles=False) == [{"role": "user", "content": prompt}]
        assert len(to_messages(render_prompt(TEMPLATES["A"], fifteen()))) == 1


class TestParsers:
    def test_reference_reply(self):
        assert parse_closed_response(REPLY_EXAMPLE) == ["1129", "1139", "1159", "1161", "829"]

    def test_extracts_from_prose(self):
        assert parse_closed_response('The answer is: ["7"] thanks') == ["7"]

    def test_mixed_quotes_and_whitespace(self):
        assert parse_closed_response("[ 'a' ,\"b\",   'c'  ]") == ["a", "b", "c"]

    def test_skips_malformed_lists(self):
        assert parse_closed_response("see [1, 2] or rather ['3']") == ["3"]

    def test_empty_list_is_well_formed(self):
        assert parse_closed_response("[]") == []

    @pytest.mark.parametrize("text", ["no segments apply", "[1129, 829]", "['unterminated", ""])
    def test_no_list(self, text):
        with pytest.raises(ParseError):
            parse_closed_response(text)

    def test_round_trip_on_template_example(self):
        example = TEMPLATES["A"].body.split("Example: ")[1].split(". ")[0]
        assert example == REPLY_EXAMPLE
        assert parse_closed_response(example) == ["1129", "1139", "1159", "1161", "829"]

    def test_open_json(self):
        text = json.dumps({"explanation": "because", "answer": ["1", "2", "3", "4", "5"]})
        assert parse_open_response(text) == ("because", ["1", "2", "3", "4", "5"])

    def test_open_embedded_in_prose(self):
        text = 'Sure! {"explanation": "x", "answer": ["9"]} Hope that helps.'
        assert parse_open_response(text) == ("x", ["9"])

    def test_open_python_literal_like_template_example(self):
        text = "{'explanation': 'The most relevant document segments ...', 'answer': ['1129', '829']}"
        assert parse_open_response(text) == ("The most relevant document segments ...", ["1129", "829"])

    @pytest.mark.parametrize(
        "text",
        [
            '{"explanation": "x"}',
            '{"explanation": "x", "answer": "1"}',
            '{"explanation": "x", "answer": [1, 2]}',
            "nothing here",
            '{"answer": ["1"]}',
            "{{}}",  # literal_eval raises TypeError on an unhashable set member
        ],
    )
    def test_open_errors(self, text):
        with pytest.raises(ParseError):
            parse_open_response(text)


class TestRepair:
    def test_hand_traced_pipeline(self):
        # dedupe -> [c3, zz, c1, c2, c4]; drop foreign -> [c3, c1, c2, c4]; pad with c5
        ids = ["c3", "c3", "zz", "c1", "c2", "c4"]
        chosen, repairs = repair_selection(ids, [f"c{i}" for i in range(1, 16)], 5)
        assert chosen == ["c3", "c1", "c2", "c4", "c5"]
        assert repairs == [DUPLICATES_REMOVED, FOREIGN_IDS_DROPPED, PADDED_FROM_RETRIEVER]

    def test_truncation_is_silent(self):
        chosen, repairs = repair_selection([f"c{i}" for i in range(15, 0, -1)], [f"c{i}" for i in range(1, 16)], 5)
        assert chosen == ["c15", "c14", "c13", "c12", "c11"]
        assert repairs == []

    def test_fewer_candidates_than_k(self):
        chosen, repairs = repair_selection([], ["a", "b"], 5)
        assert chosen == ["a", "b"] and repairs == [PADDED_FROM_RETRIEVER]


class TestRerank:
    def test_scripted_repair_example(self):
        client = ScriptedChatClient("['c3','c3','zz','c1','c2','c4']")
        res = rerank(client, TEMPLATES["A"], fifteen(), 5)
        assert res.chosen == ["c3", "c1", "c2", "c4", "c5"]
        assert set(res.repairs) == {DUPLICATES_REMOVED, FOREIGN_IDS_DROPPED, PADDED_FROM_RETRIEVER}

    def test_prose_falls_back_to_retriever(self):
        res = rerank(ScriptedChatClient("I think segment three is best."), TEMPLATES["A"], fifteen(), 5)
        assert res.chosen == ["c1", "c2", "c3", "c4", "c5"]
        assert res.repairs == [PARSE_FALLBACK]

    def test_open_format(self):
        reply = json.dumps({"explanation": "lease notes", "answer": ["c9", "c2"]})
        res = rerank(ScriptedChatClient(reply), TEMPLATES["D"], fifteen(), 5)
        assert res.chosen == ["c9", "c2", "c1", "c3", "c4"]
        assert res.explanation == "lease notes"
        assert res.repairs == [PADDED_FROM_RETRIEVER]

    def test_closed_reply_to_open_template_falls_back(self):
        res = rerank(ScriptedChatClient("['c9']"), TEMPLATES["C"], fifteen(), 5)
        assert res.repairs == [PARSE_FALLBACK]

    def test_oracle(self):
        cs = fifteen()
        client = OracleChatClient({cs.requirement.text: {"c7", "c12", "not-a-candidate"}}, k=5)
        res = rerank(client, TEMPLATES["A"], cs, 5)
        assert res.chosen == ["c7", "c12", "c1", "c2", "c3"]
        assert res.repairs == []
        res_open = rerank(client, TEMPLATES["C"], cs, 5)
        assert res_open.chosen == res.chosen and res_open.repairs == []

    def test_oracle_prefers_longest_requirement_match(self):
        cs = fifteen("Disclose the lease terms and options.")
        client = OracleChatClient({"Disclose the lease terms": {"c1"}, "Disclose the lease terms and options.": {"c4"}})
        assert rerank(client, TEMPLATES["B"], cs, 1).chosen == ["c4"]

    def test_temperature_zero_and_roles(self):
        seen = {}

        class Spy:
            supports_roles = False

            def complete(self, messages, temperature=0.3):
                seen["t"], seen["m"] = temperature, messages
                return "['c1']"

        rerank(Spy(), TEMPLATES["B"], fifteen(), 5)
        assert seen["t"] == 0.0
        assert len(seen["m"]) == 1 and seen["m"][0]["content"].startswith("System: ")

    @given(st.binary(max_size=200), st.integers(1, 20))
    def test_any_reply_yields_valid_selection(self, raw, k):
        cs = fifteen()
        text = raw.decode("utf-8", errors="replace")
        for tid in "AC":
            res = rerank(ScriptedChatClient(text), TEMPLATES[tid], cs, k)
            assert set(res.chosen) <= set(cs.ids)
            assert len(set(res.chosen)) == len(res.chosen) == min(k, 15)


class TestRemoteChat:
    def test_request_shape(self, monkeypatch):
        seen = {}

        def handler(request):
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"choices": [{"message": {"content": "['c1']"}}]})

        monkeypatch.setenv("AUDITMATCH_CHAT_API_KEY", "k-123")
        client = RemoteChatClient("http://llm/v1/chat/completions", "gpt-4", transport=httpx.MockTransport(handler))
        res = rerank(client, TEMPLATES["B"], fifteen(), 5)
        assert seen["body"]["model"] == "gpt-4"
        assert seen["body"]["temperature"] == 0.0
        assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
        assert seen["auth"] == "Bearer k-123"
        assert res.chosen[0] == "c1"

    def test_retries_then_raises(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(429)

        client = RemoteChatClient("http://llm", "m", backoff=0, transport=httpx.MockTransport(handler))
        with pytest.raises(RerankError, match="3 attempts"):
            rerank(client, TEMPLATES["A"], fifteen(), 5)
        assert len(calls) == 3

    def test_in_flight_bound(self):
        import threading
        import time

        active, peak = [0], [0]
        lock = threading.Lock()

        def handler(request):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            time.sleep(0.02)
            with lock:
                active[0] -= 1
            return httpx.Response(200, json={"choices": [{"message": {"content": "[]"}}]})

        client = RemoteChatClient("http://llm", "m", max_in_flight=2, transport=httpx.MockTransport(handler))
        threads = [threading.Thread(target=client.complete, args=([{"role": "user", "content": "x"}],)) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert peak[0] <= 2
