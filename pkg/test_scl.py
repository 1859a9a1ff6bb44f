import pytest
import torch

import numerics
from errors import ConfigError, FormatError, InconsistentSynonymCount, MissingCategory, ShapeMismatch
from mini_vlm import encode_categories, encode_image
from numerics import TrainableSet, l2_normalize
from scl import (
    SceneContexts,
    enrich,
    load_synonyms,
    parse_synonyms,
    recalibrate,
    recalibrate_all,
    scl_target,
    write_synonyms,
    zero_logits,
)

LIBRARY_TEXT = """\
# toy library
building: house, roof, rooftop
Road : street,  highway , lane

water: river, lake, pond   # trailing comment
"""


def test_parse_synonyms():
    library = parse_synonyms(LIBRARY_TEXT)
    assert library.Z == 3
    assert library.synonyms('road') == ['street', 'highway', 'lane']
    assert library.synonyms('  WATER ') == ['river', 'lake', 'pond']
    with pytest.raises(MissingCategory):
        library.synonyms('tree')
    with pytest.raises(MissingCategory):
        parse_synonyms(LIBRARY_TEXT, ['building', 'tree'])


@pytest.mark.parametrize('text, line', [
    ("building house, roof\n", 1),
    ("building: house\n: roof\n", 2),
    ("building: house, , roof\n", 1),
    ("building: house\nbuilding: roof\n", 2),
])
def test_malformed_lines_report_their_number(text, line):
    with pytest.raises(FormatError) as info:
        parse_synonyms(text)
    assert info.value.line == line


def test_inconsistent_synonym_counts():
    with pytest.raises(InconsistentSynonymCount):
        parse_synonyms("building: house, roof\nroad: street\n")


def test_write_and_load_round_trip(tmp_path):
    library = parse_synonyms(LIBRARY_TEXT)
    path = tmp_path / 'synonyms.txt'
    write_synonyms(library, path)
    assert load_synonyms(path).entries == library.entries


def test_truncated_library():
    library = parse_synonyms(LIBRARY_TEXT)
    short = library.truncated(2)
    assert short.Z == 2
    assert short.synonyms('building') == ['house', 'roof']
    with pytest.raises(ConfigError):
        library.truncated(4)


def test_builtin_library_covers_the_category_pool(library):
    assert library.Z == 5
    assert library.synonyms('large vehicle') == ['truck', 'lorry', 'bus', 'heavy vehicle', 'transport vehicle']


def test_zero_logits_give_the_synonym_mean(tiny_model, library, categories):
    enriched = enrich(tiny_model, categories, library)
    assert tuple(enriched.synonyms.shape) == (3, 16, 5)
    for mode in ('per_dimension', 'per_synonym'):
        logits = zero_logits(16, 5, mode)
        for j in range(3):
            expected = l2_normalize(enriched.synonyms[j].mean(dim=-1), dim=0)
            assert torch.allclose(recalibrate(logits, enriched.synonyms[j], 0.01), expected, atol=1e-12)


def test_sharp_logits_select_one_synonym(tiny_model, library, categories):
    enriched = enrich(tiny_model, categories, library)
    logits = torch.zeros((16, 5), dtype=numerics.DTYPE)
    logits[:, 2] = 1.0
    out = recalibrate(logits, enriched.synonyms[1], 0.01)
    assert torch.allclose(out, enriched.synonyms[1][:, 2], atol=1e-12)


def test_scene_contexts_are_registered_trainables():
    trainables = TrainableSet()
    contexts = SceneContexts(trainables, 16, 5)
    assert tuple(contexts.logits.shape) == (16, 5)
    assert trainables.names() == ['contexts.logits']
    assert float(contexts.logits.abs().sum()) == 0.0
    scalar = SceneContexts(TrainableSet(), 16, 5, mode='per_synonym')
    assert tuple(scalar.logits.shape) == (5,)
    with pytest.raises(ConfigError):
        SceneContexts(TrainableSet(), 16, 5, mode='per_class')


def test_recalibrate_shape_checks(tiny_model, library, categories):
    enriched = enrich(tiny_model, categories, library)
    with pytest.raises(ShapeMismatch):
        recalibrate(torch.zeros((16, 4), dtype=numerics.DTYPE), enriched.synonyms[0])
    with pytest.raises(ShapeMismatch):
        recalibrate(torch.zeros(5, dtype=numerics.DTYPE), enriched.synonyms)


def test_semantic_target_is_the_mean_of_both_similarities(tiny_model, library, categories, image):
    enriched = enrich(tiny_model, categories, library)
    T = encode_categories(tiny_model, categories)
    T_breve = recalibrate_all(zero_logits(16, 5), enriched, 0.01)
    V = encode_image(tiny_model, image)
    y_scl, y_hat, y_bar = scl_target(V, T, T_breve)
    assert torch.equal(y_scl.scores, (y_hat.scores + y_bar.scores) / 2.0)
    assert tuple(y_scl.scores.shape) == (4, 4, 3)
    assert T_breve.category_names == categories


def test_invalid_utf8_library_reports_its_line(tmp_path):
    path = tmp_path / 'synonyms.txt'
    path.write_bytes(b"building: house, roof\n\xff\xfe: bad\n")
    with pytest.raises(FormatError) as excinfo:
        load_synonyms(path)
    assert excinfo.value.line == 2
