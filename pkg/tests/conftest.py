from __future__ import annotations

import xml.etree.ElementTree as ET

import pytest

from arabic_absa.corpus import AspectInstance


def haad_xml(sentences) -> bytes:
    """sentences: list of (id, text, [(term, polarity), ...]); offsets via str.find."""
    root = ET.Element("sentences")
    for sid, text, terms in sentences:
        s = ET.SubElement(root, "sentence", id=sid)
        ET.SubElement(s, "text").text = text
        at = ET.SubElement(s, "aspectTerms")
        for term, pol in terms:
            start = text.find(term)
            ET.SubElement(at, "aspectTerm", term=term, polarity=pol,
                          **{"from": str(start), "to": str(start + len(term))})
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def hotels_xml(reviews) -> bytes:
    """reviews: list of (rid, [(sid, text, [(target, category, polarity), ...])])."""
    root = ET.Element("Reviews")
    for rid, sentences in reviews:
        r = ET.SubElement(root, "Review", rid=rid)
        ss = ET.SubElement(r, "sentences")
        for sid, text, opinions in sentences:
            s = ET.SubElement(ss, "sentence", id=sid)
            ET.SubElement(s, "text").text = text
            if opinions is None:
                continue
            ops = ET.SubElement(s, "Opinions")
            for target, category, pol in opinions:
                if target == "NULL":
                    start, end = 0, 0
                else:
                    start = text.find(target)
                    end = start + len(target)
                ET.SubElement(ops, "Opinion", target=target, category=category,
                              polarity=pol, **{"from": str(start), "to": str(end)})
        # text-level opinions must be ignored
        tl = ET.SubElement(r, "Opinions")
        ET.SubElement(tl, "Opinion", category="HOTEL#GENERAL", polarity="positive")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def news_xml(posts, orphan_comments=()) -> bytes:
    """posts: list of (id, text, [(term, polarity)], [comment ids])."""
    root = ET.Element("posts")
    for pid, text, terms, comments in posts:
        p = ET.SubElement(root, "post", id=pid)
        ET.SubElement(p, "text").text = text
        at = ET.SubElement(p, "aspectTerms")
        for term, pol in terms:
            start = text.find(term)
            ET.SubElement(at, "aspectTerm", term=term, polarity=pol,
                          **{"from": str(start), "to": str(start + len(term))})
        cs = ET.SubElement(p, "comments")
        for cid in comments:
            c = ET.SubElement(cs, "comment", id=cid)
            ET.SubElement(c, "text").text = "تعليق"
            ET.SubElement(c, "commentCategory", category="Peace", polarity="positive")
    for cid in orphan_comments:
        c = ET.SubElement(root, "comment", id=cid)
        ET.SubElement(c, "text").text = "تعليق"
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


HAAD_SAMPLE = [
    ("1:0", "الرواية رائعة لكن النهاية ضعيفة", [("الرواية", "positive"), ("النهاية", "negative")]),
    ("1:1", "لا يوجد شيء يذكر", []),
    ("2:0", "أسلوب الكاتب ممل وطويل", [("أسلوب الكاتب", "negative")]),
    ("3:0", "الشخصيات جيدة والحبكة متوسطة", [("الشخصيات", "positive"), ("الحبكة", "neutral")]),
    ("3:1", "اللغة جميلة ومزعجة في آن", [("اللغة", "conflict")]),
]

HOTELS_SAMPLE = [
    ("r1", [
        ("r1:0", "الخدمة سيئة ولكن الفندق رائع وجميل جدا",
         [("الخدمة", "SERVICE#GENERAL", "negative"), ("الفندق", "HOTEL#GENERAL", "positive")]),
        ("r1:1", "موقع الفندق غير مناسب لكبار السن",
         [("موقع الفندق", "LOCATION#GENERAL", "negative")]),
        ("r1:2", "سنعود مرة أخرى", [("NULL", "HOTEL#GENERAL", "positive")]),
    ]),
    ("r2", [
        ("r2:0", "الأثاث قديم جدا", [("الأثاث", "ROOMS#DESIGN_FEATURES", "negative")]),
        ("r2:1", "وصلنا في المساء", None),
    ]),
]

NEWS_SAMPLE = [
    ("p1", "القصف استمر والمفاوضات متعثرة",
     [("القصف", "negative"), ("المفاوضات", "neutral")], ["c1", "c2"]),
    ("p2", "الهدنة صامدة", [("الهدنة", "positive")], []),
]


def make_instance(aspect="الخدمة", polarity="positive", sentence=None, idx=0,
                  dataset_id="haad", sentence_id=None) -> AspectInstance:
    sentence = sentence or f"{aspect} في الجملة"
    start = sentence.find(aspect)
    if start < 0:
        start = 0
        end = 0
    else:
        end = start + len(aspect)
    return AspectInstance(
        dataset_id=dataset_id, review_id=str(idx), sentence_id=sentence_id or f"{idx}:0",
        sentence_text=sentence, aspect_text=aspect, aspect_category=None,
        char_from=start, char_to=end, polarity=polarity)


@pytest.fixture
def haad_bytes() -> bytes:
    return haad_xml(HAAD_SAMPLE)


@pytest.fixture
def hotels_bytes() -> bytes:
    return hotels_xml(HOTELS_SAMPLE)


@pytest.fixture
def news_bytes() -> bytes:
    return news_xml(NEWS_SAMPLE, orphan_comments=["c9"])


ARABIC_LETTERS = [chr(c) for c in range(0x0621, 0x064B)]
WORDS = sorted({w for _, text, _ in HAAD_SAMPLE for w in text.split()}
               | {w for _, sents in HOTELS_SAMPLE for _, text, _ in sents for w in text.split()}
               | {w for _, text, _, _ in NEWS_SAMPLE for w in text.split()})


def vocab_tokens():
    return (WORDS + ARABIC_LETTERS + ["##" + c for c in ARABIC_LETTERS]
            + list("0123456789.,،!?#_") + ["##" + c for c in "0123456789_"]
            + list("ABCDEFGHIJKLMNOPQRSTUVWXYZ") + ["##" + c for c in "ABCDEFGHIJKLMNOPQRSTUVWXYZ"])


@pytest.fixture(scope="session")
def vocab_file(tmp_path_factory):
    from arabic_absa.encoding import write_vocab
    return write_vocab(vocab_tokens(), tmp_path_factory.mktemp("vocab") / "vocab.txt")


@pytest.fixture(scope="session")
def tok(vocab_file):
    from arabic_absa.encoding import TokenizerHandle
    return TokenizerHandle.from_vocab_file(vocab_file, max_sequence_length=32)


def check_encoding(ex, tok, inst, mode):
    """Structural invariants of an encoded example, recomputed from token ids only."""
    T = tok.max_sequence_length
    ids = list(ex.token_ids)
    assert len(ids) == len(ex.segment_ids) == len(ex.attention_mask) == T
    assert ids[0] == tok.cls_id
    n = next((i for i, t in enumerate(ids) if t == tok.pad_id), T)
    assert all(t == tok.pad_id for t in ids[n:])
    assert list(ex.attention_mask) == [1] * n + [0] * (T - n)
    seps = [i for i in range(n) if ids[i] == tok.sep_id]
    assert seps and seps[-1] == n - 1
    sentence = tok.subword_ids(inst.sentence_text)
    if mode == "single":
        assert len(seps) == 1
        assert list(ex.segment_ids) == [0] * T
        assert ids[1:n - 1] == sentence[:n - 2]
        assert ex.truncated == len(sentence) - (n - 2)
    else:
        assert len(seps) == 2
        first = seps[0]
        assert list(ex.segment_ids) == [0] * (first + 1) + [1] * (n - first - 1) + [0] * (T - n)
        aspect = tok.subword_ids(inst.aspect_text)
        # aspect intact, sentence a prefix of its full tokenization
        assert ids[first + 1:n - 1] == aspect
        kept = ids[1:first]
        assert kept == sentence[:len(kept)]
        assert ex.truncated == len(sentence) - len(kept)
        # decode round trip on subword strings
        decoded = [tok.id_to_token(i) for i in ids[:n]
                   if i not in (tok.cls_id, tok.sep_id, tok.pad_id)]
        expected = tok.subwords(inst.sentence_text)[:len(kept)] + tok.subwords(inst.aspect_text)
        assert decoded == expected


@pytest.fixture(scope="session")
def tiny_checkpoint(vocab_file, tmp_path_factory):
    from arabic_absa.model import make_random_checkpoint
    return make_random_checkpoint(tmp_path_factory.mktemp("tiny_bert"), vocab_file,
                                  num_layers=2, num_heads=2, hidden_size=32,
                                  intermediate_size=64, max_positions=64, seed=0)


TINY = dict(num_layers=2, num_heads=2, hidden_size=32)


FILLER = ["رائع", "سيئة", "ولكن", "جدا", "وجميل", "مرة", "أخرى", "في", "المساء", "قديم",
          "غير", "مناسب", "لكبار", "السن"]


def separable_corpus(n=200, seed=0, dataset_id="hotels"):
    """Label decided by which aspect the instance is about; filler words are noise."""
    import random

    from arabic_absa.corpus import DATASET_LABELS, LabeledCorpus, split

    rng = random.Random(seed)
    rules = {"الخدمة": "negative", "الفندق": "positive"}
    instances = []
    for i in range(n):
        aspect = "الخدمة" if i % 2 else "الفندق"
        words = rng.sample(FILLER, 5) + ["الخدمة", "الفندق"]
        rng.shuffle(words)
        instances.append(make_instance(aspect=aspect, polarity=rules[aspect],
                                       sentence=" ".join(words), idx=i, dataset_id=dataset_id))
    corp = LabeledCorpus(dataset_id, tuple(instances), (None,) * n, DATASET_LABELS[dataset_id])
    return split(corp, "random_70_10_20", seed=seed)


def order_corpus(n=240, seed=0, dataset_id="hotels"):
    """Same bag of words in every sentence; the label is carried by word order only."""
    import random

    from arabic_absa.corpus import DATASET_LABELS, LabeledCorpus, split

    rng = random.Random(seed)
    instances = []
    for i in range(n):
        first_pos = i % 2 == 0
        pair = ["رائع", "سيئة"] if first_pos else ["سيئة", "رائع"]
        fill = rng.sample(FILLER[2:], 3)
        words = ["الفندق"] + pair + fill
        instances.append(make_instance(aspect="الفندق", sentence=" ".join(words), idx=i,
                                       polarity="positive" if first_pos else "negative",
                                       dataset_id=dataset_id))
    corp = LabeledCorpus(dataset_id, tuple(instances), (None,) * n, DATASET_LABELS[dataset_id])
    return split(corp, "random_70_10_20", seed=seed)


@pytest.fixture
def tiny_config(tiny_checkpoint):
    from arabic_absa.trainer import TrainConfig
    return TrainConfig("hotels", input_mode="pair", learning_rate=1e-3, epochs=5, batch_size=16,
                       head_dropout=0.1, encoder_dropout=0.1, checkpoint_id=str(tiny_checkpoint),
                       max_sequence_length=32, split_mode="random_70_10_20", **TINY)
