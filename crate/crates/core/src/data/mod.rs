//! Motion recordings: file format, windowing, pseudo ground truth and
//! procedural data.

mod motion;
mod synth;
mod window;

pub use motion::{
    limb_lengths, load_motion_file, read_motion, save_motion_file, write_motion, MotionSequence,
};
pub use synth::{forward_kinematics, synth_generate, SYNTH_FPS};
pub use window::{mine_pseudo_gt, window, PseudoGtSet, SampleWindow};
