"""Shared fixtures: worked-case replay transcripts and synthetic corpora."""

from __future__ import annotations

import pytest

from causal_abstention import QAInstance, ScriptEntry


def make_corpus(count: int, language: str = "zh", prefix: str = "syn") -> list[QAInstance]:
    """Deterministic synthetic multiple-choice corpus."""

    instances = []
    for index in range(count):
        instances.append(
            QAInstance(
                id=f"{prefix}-{language}-{index:05d}",
                language=language,
                question=f"Synthetic question number {index} in {language}?",
                options=(
                    f"answer {index}-a",
                    f"answer {index}-b",
                    f"answer {index}-c",
                    f"answer {index}-d",
                ),
                gold_index=index % 4,
            )
        )
    return instances


# --- Worked case 1: collective security (native Chinese, direct branch wins) ---

CASE1_INSTANCE = QAInstance(
    id="case1",
    language="zh",
    question="集体安全的含义是什么？",
    options=(
        "多个国家共同行动进行自卫的权利",
        "盟友为维护受害国家的权利进行自卫的权利",
        "经联合国安理会授权使用武装力量",
        "经联合国大会授权的维和行动",
    ),
    gold_index=2,
)

CASE1_FEEDBACK = (
    "你选择的答案C，即“经联合国安理会授权使用武装力量”，并不完全符合“集体安全”的定义。"
    "集体安全的概念通常指的是多个国家为了维护共同的安全利益而采取联合行动，"
    "防止和应对对其中任何一个国家的侵略或威胁。因此，最合适的答案是A，"
    "即“多个国家共同行动进行自卫的权利”。",
    "True。答案的确是C。集体安全的含义是指在国际体系中，通过多边合作和国际组织（如联合国）的协调，"
    "确保各国的安全。如果某一国家受到侵略或威胁，其他国家将在集体安全的框架内采取行动来恢复和平与安全。"
    "联合国安理会有权根据《联合国宪章》第七章授权使用武装力量，以维持或恢复国际和平与安全。"
    "因此，选项C是正确的。",
    "所提出的答案C是正确的。集体安全的含义是指各国通过共同协作，采取集体行动来应对对国际和平与安全的威胁。"
    "联合国安理会在集体安全机制中起着核心作用，特别是在授权使用武装力量方面。"
    "因此，选项C“经联合国安理会授权使用武装力量”准确地反映了集体安全的核心机制。",
)


def case1_script() -> list[ScriptEntry]:
    entries = [ScriptEntry(response="C.经联合国安理会授权使用武装力量")]
    entries += [ScriptEntry(response=v) for v in ("True", "True", "True")]
    for feedback, decision in zip(CASE1_FEEDBACK, ("False", "True", "True")):
        entries.append(ScriptEntry(response=feedback))
        entries.append(ScriptEntry(response=decision))
    return entries


# --- Worked case 2: smallest imaginary part (native Chinese, feedback wins) ---

CASE2_INSTANCE = QAInstance(
    id="case2",
    language="zh",
    question=(
        "对于复数 z = a + bi，已知 a 和 b 为正整数，并且 z^3 + z^2 + z 是实数。"
        "找出最小可能的 b 值。"
    ),
    options=("10", "1", "6", "11"),
    gold_index=3,
)

CASE2_FEEDBACK = (
    "False. 对于复数z=a+bi，已知a和b为正整数，并且z3+z2+z是实数。我们需要找到满足条件的最小b值。"
    "从上面的推导，我们有虚部为零的条件：b(1+2a+3a2−b2)=0。因为b为正整数，所以：1+2a+3a2=b2。"
    "我们尝试不同的a值以找到最小的b值：当a=6时，b=11是整数。因此，最小的b值为 11。"
    "所以选项 D 是正确的，而提议的答案 C 是不正确的。",
    "False。你的答案是 C，但我们需要验证它是否正确。我们考虑复数 z=a+bi，其中 a和 b是正整数，"
    "并且 z^3+z^2+z 是实数。我们可以将 z 分别代入中，展开并分离出实部和虚部。设虚部为零，"
    "通过计算可以得到相应的条件。经过详细推导和计算，最小可能的b值应为 1。因此，答案 C 是不正确的。",
    "你所提出的答案 C (6) 是正确的。为了验证这一点，我们需要考虑复数 z=a+bi的条件，"
    "即z^3+z^2+z必须是实数。经过计算和分析，我们发现当b=6时，这个条件可以满足。"
    "因此，选项 C 是正确的答案。你的解答准确无误。",
)


def case2_script() -> list[ScriptEntry]:
    entries = [ScriptEntry(response="C.6")]
    entries += [ScriptEntry(response=v) for v in ("True", "False", "True")]
    for feedback, decision in zip(CASE2_FEEDBACK, ("False", "False", "True")):
        entries.append(ScriptEntry(response=feedback))
        entries.append(ScriptEntry(response=decision))
    return entries


# --- Worked case 3: survey bias (multilingual feedback, aggregated vote) ---

CASE3_INSTANCE = QAInstance(
    id="case3",
    language="zh",
    question="以下哪个最不可能减少样本调查中的偏差？",
    options=(
        "首次未回应调查的人后继续跟进",
        "以中立的方式提问，避免影响回答",
        "使用分层随机抽样而不是简单随机抽样",
        "随机选择样本",
    ),
    gold_index=2,
)

CASE3_EN_FEEDBACK = (
    "The proposed answer, D, is incorrect. Randomly choosing samples (D) is actually a "
    "fundamental method for reducing bias in sample surveys, as it ensures that every "
    "individual in the population has an equal chance of being selected. The correct "
    "answer should be A."
)

CASE3_IT_FEEDBACK = (
    "La risposta proposta, D, non è corretta. La scelta casuale del campione è una "
    "tecnica fondamentale per ridurre il bias nel campionamento. Pertanto, la risposta "
    "più corretta sarebbe quella che non contribuisce a ridurre il bias."
)

CASE3_NL_FEEDBACK = (
    "De voorgestelde antwoordoptie D is inderdaad correct. Het willekeurig kiezen van "
    "een steekproef is een gebruikelijke methode om een representatieve steekproef te "
    "verkrijgen en kan helpen om vooringenomenheid te verminderen."
)

CASE3_DECISIONS = {
    "en": ("False", "False", "True"),
    "it": ("False", "True", "False"),
    "nl": ("True", "False", "True"),
}


def case3_script() -> list[ScriptEntry]:
    entries = [ScriptEntry(response="D.随机选择样本")]
    entries += [ScriptEntry(response=v) for v in ("True", "False", "False")]
    paragraphs = {
        "en": CASE3_EN_FEEDBACK,
        "it": CASE3_IT_FEEDBACK,
        "nl": CASE3_NL_FEEDBACK,
    }
    for language in ("en", "it", "nl"):
        for iteration in range(3):
            entries.append(
                ScriptEntry(response=f"{paragraphs[language]} (review {iteration + 1})")
            )
            entries.append(ScriptEntry(response=CASE3_DECISIONS[language][iteration]))
    return entries


@pytest.fixture
def case1():
    return CASE1_INSTANCE, case1_script()


@pytest.fixture
def case2():
    return CASE2_INSTANCE, case2_script()


@pytest.fixture
def case3():
    return CASE3_INSTANCE, case3_script()
