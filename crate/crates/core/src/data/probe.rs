use serde::{Deserialize, Serialize};

use super::scene::{render, SceneGraph, ShapeKind};
use crate::error::{Error, Result};

/// Segmentation class of patches not covered by any object.
pub const BACKGROUND_CLASS: u8 = 0;
/// Background plus one class per shape kind.
pub const SEGMENTATION_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLabels {
    /// Index into `ShapeKind::ALL` of the dominant kind; `None` for an empty scene.
    pub label: Option<u8>,
    /// Row-major patch classes, `BACKGROUND_CLASS` or `ShapeKind::class_id`.
    pub mask: Vec<u8>,
    pub grid: usize,
}

/// The most frequent shape kind, ties broken by painted area and then by kind order.
pub fn dominant_kind(scene: &SceneGraph, owner: &[Option<usize>]) -> Option<ShapeKind> {
    let mut area = [0usize; 4];
    for o in owner.iter().flatten() {
        area[scene.objects[*o].shape.kind() as usize] += 1;
    }
    ShapeKind::ALL
        .into_iter()
        .filter(|&k| scene.count_kind(k) > 0)
        .max_by(|&a, &b| {
            (scene.count_kind(a), area[a as usize])
                .cmp(&(scene.count_kind(b), area[b as usize]))
                .then((b as usize).cmp(&(a as usize)))
        })
}

/// Classification label and patch mask. A patch takes the class of the object
/// painted at its center pixel.
pub fn probe_labels(scene: &SceneGraph, patch_size: usize) -> Result<ProbeLabels> {
    if patch_size == 0 || !scene.image_size.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide image size {}",
            scene.image_size
        )));
    }
    let (_, owner) = render(scene)?;
    let grid = scene.image_size / patch_size;
    let mut mask = Vec::with_capacity(grid * grid);
    for pr in 0..grid {
        for pc in 0..grid {
            let (y, x) = (
                pr * patch_size + patch_size / 2,
                pc * patch_size + patch_size / 2,
            );
            mask.push(match owner[y * scene.image_size + x] {
                Some(i) => scene.objects[i].shape.kind().class_id(),
                None => BACKGROUND_CLASS,
            });
        }
    }
    Ok(ProbeLabels {
        label: dominant_kind(scene, &owner).map(|k| k as u8),
        mask,
        grid,
    })
}
