//! Domain types: B-scans, label maps, per-class binary masks and layer
//! surfaces, plus the conversions between multiclass label maps and
//! per-branch binary masks.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default foreground class scheme. Index 0 is always background, so
/// `OBRPE = 1`, `BM = 2`, `DRUSEN = 3` in label maps using this scheme.
pub const DEFAULT_CLASS_NAMES: [&str; 3] = ["OBRPE", "BM", "DRUSEN"];

/// Class index of the upper layer in the default scheme.
pub const CLASS_OBRPE: u8 = 1;
/// Class index of the lower layer in the default scheme.
pub const CLASS_BM: u8 = 2;
/// Class index of the between-layers (surrogate) class in the default scheme.
pub const CLASS_DRUSEN: u8 = 3;

/// Laterality of the imaged eye.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Eye {
    /// Right eye (oculus dexter).
    OD,
    /// Left eye (oculus sinister).
    OS,
}

impl std::fmt::Display for Eye {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Eye::OD => write!(f, "OD"),
            Eye::OS => write!(f, "OS"),
        }
    }
}

impl std::str::FromStr for Eye {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OD" => Ok(Eye::OD),
            "OS" => Ok(Eye::OS),
            other => Err(DomainError::BadEye(other.to_string())),
        }
    }
}

/// Identity of a single B-scan within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanKey {
    pub patient_id: String,
    pub eye: Eye,
    pub visit_id: String,
    pub scan_index: u32,
}

impl ScanKey {
    pub fn new(patient_id: &str, eye: Eye, visit_id: &str, scan_index: u32) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            eye,
            visit_id: visit_id.to_string(),
            scan_index,
        }
    }

    /// Volume identity: all scans acquired for one eye at one visit.
    pub fn volume_key(&self) -> (String, Eye, String) {
        (self.patient_id.clone(), self.eye, self.visit_id.clone())
    }

    /// Subject-level grouping used for split hygiene.
    pub fn eye_key(&self) -> (String, Eye) {
        (self.patient_id.clone(), self.eye)
    }

    /// Filesystem-safe identifier, stable across runs.
    pub fn slug(&self) -> String {
        format!(
            "{}_{}_{}_s{:03}",
            self.patient_id, self.eye, self.visit_id, self.scan_index
        )
    }
}

impl std::fmt::Display for ScanKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.slug())
    }
}

/// Errors raised by domain-type constructors and conversions.
#[derive(Debug, Error)]
pub enum DomainError {
    #[error("image too small: {h}x{w}, need at least 8x8")]
    TooSmall { h: usize, w: usize },
    #[error("non-finite intensity at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid label {value} at ({row}, {col}): scheme has {num_classes} foreground classes")]
    InvalidLabel {
        value: u8,
        row: usize,
        col: usize,
        num_classes: usize,
    },
    #[error("mask shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("mask contains non-binary value {value} at ({row}, {col})")]
    NonBinaryMask { value: u8, row: usize, col: usize },
    #[error("surface row {row} out of range for height {h}")]
    SurfaceRowOutOfRange { row: usize, h: usize },
    #[error("unknown eye laterality {0:?} (expected OD or OS)")]
    BadEye(String),
    #[error("priority list names unknown class {0:?}")]
    UnknownClass(String),
    #[error("empty mask stack")]
    EmptyStack,
}

/// One 2D grayscale cross-section plus provenance metadata.
///
/// Row 0 is the top of the image. Intensities are stored as `f64` regardless
/// of on-disk bit depth.
#[derive(Debug, Clone)]
pub struct BScan {
    pub pixels: Array2<f64>,
    pub key: ScanKey,
}

impl BScan {
    /// Validates the size and finiteness invariants.
    pub fn new(pixels: Array2<f64>, key: ScanKey) -> Result<Self, DomainError> {
        let (h, w) = pixels.dim();
        if h < 8 || w < 8 {
            return Err(DomainError::TooSmall { h, w });
        }
        for ((row, col), v) in pixels.indexed_iter() {
            if !v.is_finite() {
                return Err(DomainError::NonFinite { row, col });
            }
        }
        Ok(Self { pixels, key })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Per-pixel integer class map over `{0..K}` where 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub labels: Array2<u8>,
    pub class_names: Vec<String>,
}

impl LabelMap {
    /// Builds a label map, checking that every value fits the class scheme.
    pub fn new(labels: Array2<u8>, class_names: Vec<String>) -> Result<Self, DomainError> {
        let num_classes = class_names.len();
        for ((row, col), &value) in labels.indexed_iter() {
            if usize::from(value) > num_classes {
                return Err(DomainError::InvalidLabel {
                    value,
                    row,
                    col,
                    num_classes,
                });
            }
        }
        Ok(Self {
            labels,
            class_names,
        })
    }

    /// Label map with the default OBRPE/BM/DRUSEN scheme.
    pub fn with_default_classes(labels: Array2<u8>) -> Result<Self, DomainError> {
        Self::new(labels, default_class_names())
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// Number of foreground classes K.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Pixel count per foreground class, indexed `[0] == class 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &v in self.labels.iter() {
            if v > 0 {
                counts[usize::from(v) - 1] += 1;
            }
        }
        counts
    }
}

/// Owned list of the default class names.
pub fn default_class_names() -> Vec<String> {
    DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// K binary masks, one per foreground class, each the same H x W.
///
/// Masks built from a [`LabelMap`] are disjoint indicators; stacks built by
/// thresholding independent branch predictions may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMaskStack {
    pub masks: Vec<Array2<u8>>,
    pub class_names: Vec<String>,
}

impl BinaryMaskStack {
    /// Builds a stack, checking shape agreement and binarity.
    pub fn new(masks: Vec<Array2<u8>>, class_names: Vec<String>) -> Result<Self, DomainError> {
        if masks.is_empty() {
            return Err(DomainError::EmptyStack);
        }
        let expected = masks[0].dim();
        for mask in &masks {
            if mask.dim() != expected {
                return Err(DomainError::ShapeMismatch {
                    expected,
                    got: mask.dim(),
                });
            }
            for ((row, col), &value) in mask.indexed_iter() {
                if value > 1 {
                    return Err(DomainError::NonBinaryMask { value, row, col });
                }
            }
        }
        Ok(Self { masks, class_names })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.masks[0].dim()
    }

    pub fn mask(&self, class_name: &str) -> Option<&Array2<u8>> {
        self.class_names
            .iter()
            .position(|n| n == class_name)
            .map(|i| &self.masks[i])
    }
}

/// Position of one anatomical interface: per-column row plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub rows: Vec<usize>,
    pub valid: Vec<bool>,
}

impl Surface {
    pub fn invalid(width: usize) -> Self {
        Self {
            rows: vec![0; width],
            valid: vec![false; width],
        }
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }

    pub fn row_at(&self, col: usize) -> Option<usize> {
        if self.valid[col] {
            Some(self.rows[col])
        } else {
            None
        }
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Named set of surfaces for one scan.
#[derive(Debug, Clone, Default)]
pub struct SurfaceSet {
    pub surfaces: std::collections::BTreeMap<String, Surface>,
}

impl SurfaceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, surface: Surface) {
        self.surfaces.insert(name.to_string(), surface);
    }

    pub fn get(&self, name: &str) -> Option<&Surface> {
        self.surfaces.get(name)
    }

    /// Checks the structural invariants against an image height: valid rows
    /// within bounds, and OBRPE above-or-on BM wherever both are valid.
    pub fn validate(&self, height: usize) -> Result<(), DomainError> {
        for surface in self.surfaces.values() {
            for (col, &row) in surface.rows.iter().enumerate() {
                if surface.valid[col] && row >= height {
                    return Err(DomainError::SurfaceRowOutOfRange { row, h: height });
                }
            }
        }
        if let (Some(upper), Some(lower)) = (self.get("OBRPE"), self.get("BM")) {
            let w = upper.width().min(lower.width());
            for col in 0..w {
                if let (Some(u), Some(l)) = (upper.row_at(col), lower.row_at(col)) {
                    if u > l {
                        return Err(DomainError::SurfaceRowOutOfRange { row: u, h: l + 1 });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Decomposes a label map into per-class indicator masks.
///
/// Mask `k` (0-based) is 1 exactly where `labels == k + 1`.
pub fn encode_class_masks(label_map: &LabelMap) -> Result<BinaryMaskStack, DomainError> {
    let k = label_map.num_classes();
    let (h, w) = label_map.labels.dim();
    for ((row, col), &value) in label_map.labels.indexed_iter() {
        if usize::from(value) > k {
            return Err(DomainError::InvalidLabel {
                value,
                row,
                col,
                num_classes: k,
            });
        }
    }
    let mut masks = vec![Array2::<u8>::zeros((h, w)); k];
    for ((row, col), &value) in label_map.labels.indexed_iter() {
        if value > 0 {
            masks[usize::from(value) - 1][(row, col)] = 1;
        }
    }
    BinaryMaskStack::new(masks, label_map.class_names.clone())
}

/// Merges per-class masks back into a label map.
///
/// Each pixel gets the highest-priority class whose mask is set, else
/// background. `priority` lists class names from highest to lowest priority
/// and must only name classes present in the stack.
pub fn decode_label_map(
    stack: &BinaryMaskStack,
    priority: &[String],
) -> Result<LabelMap, DomainError> {
    let (h, w) = stack.shape();
    let mut order = Vec::with_capacity(priority.len());
    for name in priority {
        let idx = stack
            .class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DomainError::UnknownClass(name.clone()))?;
        order.push(idx);
    }
    let mut labels = Array2::<u8>::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            for &idx in &order {
                if stack.masks[idx][(row, col)] == 1 {
                    labels[(row, col)] = (idx + 1) as u8;
                    break;
                }
            }
        }
    }
    LabelMap::new(labels, stack.class_names.clone())
}

/// Converts a binary `u8` mask view into `f64` (used as training targets).
pub fn mask_to_f64(mask: &ArrayView2<u8>) -> Array2<f64> {
    mask.mapv(|v| f64::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn default_priority() -> Vec<String> {
        default_class_names()
    }

    #[test]
    fn encode_2x2_indicator_decomposition() {
        let labels = array![[0u8, 1], [2, 3]];
        let lm = LabelMap::with_default_classes(labels).unwrap();
        let stack = encode_class_masks(&lm).unwrap();
        assert_eq!(stack.masks.len(), 3);
        for (k, mask) in stack.masks.iter().enumerate() {
            assert_eq!(mask.sum() as usize, 1, "class {} should have one pixel", k);
        }
        // Disjoint: per-pixel sum across masks is at most 1.
        for row in 0..2 {
            for col in 0..2 {
                let s: u8 = stack.masks.iter().map(|m| m[(row, col)]).sum();
                assert!(s <= 1);
            }
        }
    }

    #[test]
    fn encode_all_zero_map() {
        let lm = LabelMap::with_default_classes(Array2::zeros((4, 4))).unwrap();
        let stack = encode_class_masks(&lm).unwrap();
        for mask in &stack.masks {
            assert_eq!(mask.sum(), 0);
        }
    }

    #[test]
    fn encode_counts_match_independent_loop() {
        // 4x4 map with class counts {1:5, 2:4, 3:2}.
        let labels = array![
            [1u8, 1, 2, 3],
            [1, 2, 2, 0],
            [1, 1, 2, 0],
            [0, 0, 3, 0]
        ];
        // Independent oracle: count each class by a direct scan.
        let mut oracle = [0usize; 3];
        for row in 0..4 {
            for col in 0..4 {
                let v = labels[(row, col)];
                if v > 0 {
                    oracle[usize::from(v) - 1] += 1;
                }
            }
        }
        assert_eq!(oracle, [5, 4, 2]);

        let lm = LabelMap::with_default_classes(labels).unwrap();
        let stack = encode_class_masks(&lm).unwrap();
        for k in 0..3 {
            assert_eq!(stack.masks[k].sum() as usize, oracle[k]);
        }
    }

    #[test]
    fn encode_rejects_invalid_label() {
        let labels = array![[0u8, 4], [0, 0]];
        let err = LabelMap::with_default_classes(labels).unwrap_err();
        match err {
            DomainError::InvalidLabel { value, row, col, .. } => {
                assert_eq!((value, row, col), (4, 0, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decode_is_inverse_of_encode_on_disjoint_masks() {
        let labels = array![[0u8, 1, 2], [3, 0, 1], [2, 2, 0]];
        let lm = LabelMap::with_default_classes(labels).unwrap();
        let stack = encode_class_masks(&lm).unwrap();
        let decoded = decode_label_map(&stack, &default_priority()).unwrap();
        assert_eq!(decoded, lm);
    }

    #[test]
    fn decode_overlap_takes_priority() {
        let mut obrpe = Array2::<u8>::zeros((2, 2));
        let mut drusen = Array2::<u8>::zeros((2, 2));
        obrpe[(0, 0)] = 1;
        drusen[(0, 0)] = 1;
        let stack = BinaryMaskStack::new(
            vec![obrpe, Array2::zeros((2, 2)), drusen],
            default_class_names(),
        )
        .unwrap();
        let decoded = decode_label_map(&stack, &default_priority()).unwrap();
        assert_eq!(decoded.labels[(0, 0)], CLASS_OBRPE);
    }

    #[test]
    fn decode_matches_bruteforce_on_random_overlapping_stacks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let masks: Vec<Array2<u8>> = (0..3)
                .map(|_| Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..=1u8)))
                .collect();
            let stack = BinaryMaskStack::new(masks.clone(), default_class_names()).unwrap();
            let decoded = decode_label_map(&stack, &default_priority()).unwrap();

            // Brute-force oracle: per-pixel scan in priority order.
            for row in 0..8 {
                for col in 0..8 {
                    let mut expected = 0u8;
                    for (k, mask) in masks.iter().enumerate() {
                        if mask[(row, col)] == 1 {
                            expected = (k + 1) as u8;
                            break;
                        }
                    }
                    assert_eq!(decoded.labels[(row, col)], expected);
                }
            }
        }
    }

    #[test]
    fn decode_rejects_shape_mismatch() {
        let err = BinaryMaskStack::new(
            vec![Array2::zeros((2, 2)), Array2::zeros((2, 3))],
            vec!["A".into(), "B".into()],
        )
        .unwrap_err();
        assert!(matches!(err, DomainError::ShapeMismatch { .. }));
    }

    #[test]
    fn surface_set_rejects_crossing() {
        let mut set = SurfaceSet::new();
        set.insert(
            "OBRPE",
            Surface {
                rows: vec![10, 12],
                valid: vec![true, true],
            },
        );
        set.insert(
            "BM",
            Surface {
                rows: vec![11, 11],
                valid: vec![true, true],
            },
        );
        assert!(set.validate(32).is_err());
    }

    fn arb_label_map() -> impl Strategy<Value = LabelMap> {
        (4usize..10, 4usize..10)
            .prop_flat_map(|(h, w)| {
                proptest::collection::vec(0u8..=3, h * w).prop_map(move |values| {
                    let labels = Array2::from_shape_vec((h, w), values).unwrap();
                    LabelMap::with_default_classes(labels).unwrap()
                })
            })
    }

    proptest! {
        #[test]
        fn round_trip_encode_decode(lm in arb_label_map()) {
            let stack = encode_class_masks(&lm).unwrap();
            let decoded = decode_label_map(&stack, &default_priority()).unwrap();
            prop_assert_eq!(decoded, lm);
        }

        #[test]
        fn conservation_of_foreground(lm in arb_label_map()) {
            let stack = encode_class_masks(&lm).unwrap();
            let fg: usize = lm.labels.iter().filter(|&&v| v > 0).count();
            let total: usize = stack.masks.iter().map(|m| m.sum() as usize).sum();
            prop_assert_eq!(fg, total);
        }
    }

    #[test]
    fn mask_to_f64_converts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mask = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0..=1u8));
        let f = mask_to_f64(&mask.view());
        for (a, b) in mask.iter().zip(f.iter()) {
            assert_eq!(f64::from(*a), *b);
        }
    }
}
