"""Quality checks that need a fully converged model.

These tests exercise claims about end-to-end behavior: the decoder
recovers masks from their latents, the segmentation adapter produces
usable masks, and the retrieval bank stores latents that decode back to
their sources.  They share the session-scoped training fixtures.
"""

import numpy as np

from crisp import build_bank, decode, dice_score, encode_mask, segment


def reconstruction_accuracy(model, mask):
    """Fraction of pixels whose class survives an encode/decode trip."""
    probs = decode(model, encode_mask(model, mask))
    return float(np.mean(probs.argmax(axis=0) == mask.argmax(axis=0)))


class TestMaskReconstruction:
    def test_mean_pixel_accuracy_at_least_95_percent(self, main_run):
        accs = [reconstruction_accuracy(main_run.model, s.mask)
                for s in main_run.train_samples]
        assert np.mean(accs) >= 0.95

    def test_no_sample_collapses(self, main_run):
        """Even the worst training sample should beat a blank prediction."""
        accs = [reconstruction_accuracy(main_run.model, s.mask)
                for s in main_run.train_samples]
        assert min(accs) > 0.8


class TestSegmentAdapter:
    def test_noise_free_mean_dice_at_least_085(self, noise_free_run):
        run = noise_free_run
        dices = [dice_score(segment(run.model, s.image), s.mask)
                 for s in run.train_samples]
        assert np.mean(dices) >= 0.85

    def test_noisy_model_still_segments(self, main_run):
        dices = [dice_score(segment(main_run.model, s.image), s.mask)
                 for s in main_run.train_samples]
        assert np.mean(dices) >= 0.8

    def test_probabilities_are_valid(self, main_run):
        probs = segment(main_run.model, main_run.train_samples[0].image)
        assert probs.shape == (3, 32, 32)
        assert np.all(probs >= 0.0)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)


class TestBankLatents:
    def test_bank_latents_decode_to_their_masks(self, main_run):
        masks = [s.mask for s in main_run.dataset.samples]
        bank = build_bank(masks, main_run.model)
        accs = []
        for i, mask in enumerate(masks):
            probs = decode(main_run.model, bank.z_bar[i])
            accs.append(np.mean(probs.argmax(axis=0) == mask.argmax(axis=0)))
        assert np.mean(accs) >= 0.95

    def test_bank_embeddings_are_unit_length(self, main_run):
        masks = [s.mask for s in main_run.dataset.samples]
        bank = build_bank(masks, main_run.model)
        norms = np.linalg.norm(bank.h_bar, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestTrainingHistory:
    def test_selected_epoch_has_minimal_validation_loss(self, main_run):
        hist = main_run.history
        assert hist.selected_epoch == int(np.argmin(hist.val_loss))

    def test_history_values_are_finite(self, main_run):
        hist = main_run.history
        for series in (hist.train_loss, hist.val_loss, hist.val_contrastive,
                       hist.val_reconstruction, hist.diag_accuracy):
            assert len(series) == hist.num_epochs()
            assert np.all(np.isfinite(series))

    def test_loss_improves_over_training(self, main_run):
        hist = main_run.history
        assert hist.val_loss[hist.selected_epoch] < hist.val_loss[0]
