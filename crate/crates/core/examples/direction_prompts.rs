//! Direction labels and augmented prompts for the eight-view schedule.
//!
//! `cargo run --example direction_prompts -- "a wooden chair"`

use texsync::camera::{ViewSchedule, DEFAULT_DISTANCE, DEFAULT_FOV_Y};
use texsync::guidance::{direction_label, direction_prompts, DirectionBins};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = std::env::args().nth(1).unwrap_or_else(|| "a ceramic teapot".into());
    let schedule = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, 64)?;
    let bins = DirectionBins::default();
    let prompts = direction_prompts(&base, schedule.poses(), &bins)?;
    for (pose, prompt) in schedule.poses().iter().zip(&prompts) {
        println!(
            "az {:7.1} el {:6.1}  {:5}  {prompt}",
            pose.azimuth,
            pose.elevation,
            direction_label(pose, &bins).as_str()
        );
    }
    Ok(())
}
