//! JSON bodies of the HTTP API. Poses use the scene-file record
//! `{quaternion: [w, x, y, z], translation, fovY, width?, height?}`.

use sanerf_core::camera::PoseRecord;
use sanerf_core::mesh::ClickView;
use sanerf_core::rle::MaskRle;
use sanerf_core::teacher::TeacherKind;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionInfo {
    pub snapshot_id: String,
    pub teacher_kind: TeacherKind,
    pub prompt_vocabulary: Vec<String>,
    pub mesh_attached: bool,
    pub mesh_triangle_count: usize,
    /// Teacher encodes issued by this process; serving never adds to it.
    pub teacher_encode_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RenderRequest {
    pub pose: PoseRecord,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClickRequest {
    pub pose: PoseRecord,
    pub u: u32,
    pub v: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PromptRequest {
    pub pose: PoseRecord,
    pub prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogitsStats {
    pub min: f32,
    pub max: f32,
    pub mean: f32,
    pub positive_fraction: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SegmentResponse {
    pub mask_rle: MaskRle,
    pub logits_stats: LogitsStats,
    pub feature_render_ms: f64,
    pub decode_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProjectRequest {
    pub pose: PoseRecord,
    pub mask_rle: MaskRle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectionResponse {
    pub selected_triangle_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClickAdded {
    pub click_id: usize,
    pub world_point: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClickPosition {
    pub click_id: usize,
    #[serde(flatten)]
    pub view: ClickView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClickPositions {
    pub clicks: Vec<ClickPosition>,
}
