pub mod boxes;
pub mod head;

pub use boxes::{
    area, cell_center, combine_boxes, combine_scores, decode_coarse, encode_offsets, image_to_feature, iou,
};
pub use head::{BorderDet, ForwardCache, HeadGrads, HeadOutputs, ModelConfig};

use serde::{Deserialize, Serialize};

/// One decoded detection in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}
