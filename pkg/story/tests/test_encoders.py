import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from story.data.render import render_scene
from story.encoders.model import DualEncoder, pooled_embedding
from story.encoders.pretrain import contrastive_pretrain, info_nce_loss, retrieval_accuracy, similarity_matrix
from story.encoders.vocab import BOS, EOS, PAD, UNK, Vocabulary, detokenize, tokenize, tokenize_batch
from story.exceptions import DataFormatError, DimensionError
from story.numerics.gradcheck import grad_check
from story.numerics.nn import Role
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import precision

from .helpers import tiny_corpus

CAPTION = "the small red circle sits on the white background"


def tiny_encoder(image_size: int = 32, patch: int = 8) -> DualEncoder:
    return DualEncoder(
        RngStream(0, Stream.INIT), Vocabulary.from_grammar(), dim=8, image_size=image_size, patch=patch, blocks=1
    )


class VocabularyTests(SimpleTestCase):
    def test_specials_come_first(self):
        vocab = Vocabulary.from_grammar()
        self.assertEqual(vocab.tokens[:4], [PAD, BOS, EOS, UNK])
        self.assertEqual(vocab.pad_id, 0)

    def test_save_and_load(self):
        vocab = Vocabulary.from_grammar()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "vocab.txt"
            vocab.save(path)
            self.assertEqual(Vocabulary.load(path), vocab)

    def test_rejects_malformed_vocabularies(self):
        with self.assertRaises(DataFormatError):
            Vocabulary(["the", PAD, BOS, EOS, UNK])
        with self.assertRaises(DataFormatError):
            Vocabulary([PAD, BOS, EOS, UNK, "the", "the"])


class TokenizeTests(SimpleTestCase):
    def setUp(self):
        self.vocab = Vocabulary.from_grammar()

    def test_bos_eos_and_padding(self):
        tokens = tokenize(CAPTION, self.vocab, max_len=16)
        self.assertEqual(tokens.length, 9 + 2)
        self.assertEqual(tokens.ids[0], self.vocab.ids[BOS])
        self.assertEqual(tokens.ids[10], self.vocab.ids[EOS])
        self.assertTrue((tokens.ids[11:] == self.vocab.pad_id).all())
        self.assertFalse(tokens.truncated)
        self.assertEqual(detokenize(tokens, self.vocab), CAPTION)

    def test_unknown_word_maps_to_unk(self):
        tokens = tokenize("the small red blob", self.vocab)
        self.assertEqual(tokens.ids[4], self.vocab.ids[UNK])

    def test_truncation_is_logged(self):
        with self.assertLogs("story.encoders.vocab", "WARNING"):
            tokens = tokenize(CAPTION, self.vocab, max_len=6)
        self.assertTrue(tokens.truncated)
        self.assertTrue(tokens.mask.all())
        self.assertEqual(tokens.ids[-1], self.vocab.ids[EOS])

    def test_batch_stacks_rows(self):
        batch = tokenize_batch([CAPTION, "nothing on the gray background"], self.vocab)
        self.assertEqual(batch.ids.shape, (2, 32))
        self.assertEqual(batch.mask.sum(axis=1).tolist(), [11, 7])


class DualEncoderTests(SimpleTestCase):
    def setUp(self):
        self.encoder = tiny_encoder()

    def test_padding_rows_are_zero(self):
        tokens = tokenize_batch([CAPTION], self.encoder.vocab)
        text = self.encoder.encode_text(tokens)
        self.assertEqual(text.tokens.shape, (1, 32, 8))
        self.assertTrue((text.tokens.data[~tokens.mask] == 0).all())

    def test_image_patches(self):
        image = self.encoder.encode_image(np.zeros((2, 32, 32, 3), dtype=np.float32))
        self.assertEqual(image.patches.shape, (2, 16, 8))

    def test_pooled_embedding_is_unit_length(self):
        pooled = pooled_embedding(self.encoder.encode_text(tokenize_batch([CAPTION], self.encoder.vocab)))
        np.testing.assert_allclose(np.linalg.norm(pooled.data, axis=-1), 1.0, rtol=1e-5)

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            self.encoder.encode_image(np.zeros((16, 16, 3), dtype=np.float32))
        with self.assertRaises(DimensionError):
            self.encoder.encode_text(tokenize(CAPTION, self.encoder.vocab, max_len=16))
        with self.assertRaises(DimensionError):
            DualEncoder(RngStream(0, Stream.INIT), Vocabulary.from_grammar(), dim=8, image_size=32, patch=5)

    def test_similarity_matrix_shape(self):
        record = tiny_corpus(stories=1, frames=3)[0]
        sims = similarity_matrix(self.encoder, record.captions, np.stack(record.images))
        self.assertEqual(sims.shape, (3, 3))
        self.assertTrue((np.abs(sims) <= 1.0 + 1e-5).all())


class PretrainTests(SimpleTestCase):
    def setUp(self):
        self.pairs = [(frame.caption, frame.image) for record in tiny_corpus(stories=2, frames=3) for frame in record.frames]

    def test_pretraining_freezes_the_encoder(self):
        encoder = tiny_encoder()
        seen = []
        encoder, curve = contrastive_pretrain(
            encoder, self.pairs, steps=3, rng=RngStream(0, Stream.BATCH), batch_size=4, on_step=seen.append
        )
        self.assertEqual(len(curve), 3)
        self.assertEqual(seen, curve)
        self.assertTrue(all(p.frozen and p.role == Role.ENCODER for p in encoder.parameters()))
        self.assertTrue(all(np.isfinite(point.loss) for point in curve))
        self.assertGreaterEqual(retrieval_accuracy(encoder, self.pairs), 0.0)

    def test_degenerate_batches_are_skipped(self):
        image = render_scene(tiny_corpus(stories=1, frames=2)[0].frames[0].graph)
        pairs = [(CAPTION, image)] * 3
        with self.assertLogs("story.encoders.pretrain", "WARNING"):
            _, curve = contrastive_pretrain(tiny_encoder(), pairs, steps=2, rng=RngStream(0, Stream.BATCH))
        self.assertEqual(curve, [])

    def test_needs_two_pairs(self):
        with self.assertRaises(ValueError):
            contrastive_pretrain(tiny_encoder(), self.pairs[:1], steps=1, rng=RngStream(0, Stream.BATCH))

    def test_info_nce_gradients(self):
        rng = RngStream(5, Stream.EVAL)
        captions = [CAPTION, "nothing on the gray background", "the large blue star jumps on the navy background"]
        with precision(np.float64):
            encoder = tiny_encoder(image_size=8, patch=4)
            images = rng.uniform((3, 8, 8, 3))
            error = grad_check(
                lambda: info_nce_loss(encoder, captions, images),
                encoder.parameters(),
                coords_per_param=2,
                rng=rng,
            )
        self.assertLess(error, 1e-4)
