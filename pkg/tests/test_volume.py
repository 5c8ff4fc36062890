"""
Tests for volume.py module
"""

import numpy as np
import pytest

from volume import Modality, Plane, Volume, parse_orientation, reorient_array


class TestParseOrientation:
    def test_upper_cases(self):
        assert parse_orientation(" iar ") == "IAR"

    @pytest.mark.parametrize("code", ["SA", "SARX", "SXR", ""])
    def test_malformed(self, code):
        with pytest.raises(ValueError, match="three letters"):
            parse_orientation(code)

    def test_repeated_axis(self):
        with pytest.raises(ValueError, match="repeats"):
            parse_orientation("SIR")


class TestReorientArray:
    """Axis permutation and flips between orientation codes."""

    def test_identity(self, rng):
        data = rng.standard_normal((3, 4, 5))
        out, spacing = reorient_array(data, (1.0, 2.0, 3.0), "SAR", "SAR")
        np.testing.assert_array_equal(out, data)
        assert spacing == (1.0, 2.0, 3.0)

    def test_single_flip(self, rng):
        data = rng.standard_normal((3, 4, 5))
        out, _ = reorient_array(data, (1.0, 1.0, 1.0), "IAR", "SAR")
        np.testing.assert_array_equal(out, data[::-1])

    def test_permutation_moves_spacing(self, rng):
        data = rng.standard_normal((3, 4, 5))
        out, spacing = reorient_array(data, (1.0, 2.0, 3.0), "ASR", "SAR")
        assert out.shape == (4, 3, 5)
        assert spacing == (2.0, 1.0, 3.0)
        np.testing.assert_array_equal(out, data.transpose(1, 0, 2))

    @pytest.mark.parametrize("code", ["IAR", "RPS", "LIA", "PSL"])
    def test_there_and_back(self, rng, code):
        data = rng.standard_normal((3, 4, 5))
        stored, spacing = reorient_array(data, (1.0, 2.0, 3.0), "SAR", code)
        back, back_spacing = reorient_array(stored, spacing, code, "SAR")
        np.testing.assert_array_equal(back, data)
        assert back_spacing == (1.0, 2.0, 3.0)

    def test_result_is_contiguous(self, rng):
        out, _ = reorient_array(rng.standard_normal((3, 4, 5)), (1.0, 1.0, 1.0), "PIL", "SAR")
        assert out.flags["C_CONTIGUOUS"]


class TestVolume:
    """Volume validates its geometry at construction."""

    def test_rank_checked(self):
        with pytest.raises(ValueError, match="3D"):
            Volume(np.zeros((4, 4)), (1.0, 1.0, 1.0), Modality.MRI)

    @pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, float("nan"))])
    def test_degenerate_spacing(self, spacing):
        with pytest.raises(ValueError, match="degenerate"):
            Volume(np.zeros((2, 2, 2)), spacing, Modality.CT)

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError, match="mask shape"):
            Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0), Modality.MRI, mask=np.ones((2, 2, 3)))

    def test_fields_normalized(self):
        volume = Volume(np.zeros((2, 3, 4)), (1, 2, 3), "ct", "ias")
        assert volume.modality is Modality.CT
        assert volume.orientation == "IAS"
        assert volume.spacing == (1.0, 2.0, 3.0)
        assert volume.shape == (2, 3, 4)

    def test_replace_revalidates(self):
        volume = Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0), Modality.MRI)
        with pytest.raises(ValueError):
            volume.replace(data=np.zeros((2, 2)))


class TestPlane:
    def test_axes(self):
        assert [p.axis for p in Plane] == [0, 1, 2]
        assert Plane("coronal") is Plane.CORONAL
