//! Images, label maps, datasets on disk, training augmentation and the
//! synthetic long-range task.

mod augment;
mod netpbm;
mod sample;
mod synthetic;

pub use augment::{
    augment, augment_with, crop_map, flip_horizontal, pad_labels, pad_sample, reflect_index, reflect_pad,
    symmetric_pad, Pad,
};
pub use netpbm::{decode_pnm, encode_pnm, read_pnm, save_pgm, write_pnm, Pnm};
pub use sample::{load_pgm_labels, load_ppm, save_pgm_labels, save_ppm, Dataset, LabelMap, SegSample};
pub use synthetic::{
    class_schedule, cue_color, cue_oracle, generate_longrange_splits, generate_longrange_task, generate_sample,
    LongRangeTaskConfig,
};
