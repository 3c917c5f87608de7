//! Renders a short synthetic sequence, computes exact optical flow between
//! neighbouring frames, and round-trips images, flow and poses through disk.

use std::fs::File;
use std::io::BufReader;

use atdn::dataio::{
    flow_oracle, parse_pose_file, read_flow, read_frame, synth_sequence, write_flow, write_pgm, write_pose_file,
    ImageFormat, SyntheticWorld, TrajectorySpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = SyntheticWorld {
        frames: 100,
        trajectory: TrajectorySpec::Circle { radius: 8.0 },
        ..SyntheticWorld::default()
    };
    let (frames, traj) = synth_sequence(&world, 42)?;
    let dir = std::env::temp_dir().join("atdn-synth-flow");
    std::fs::create_dir_all(&dir)?;

    let first = &frames[0];
    write_pgm(&first.image, &mut File::create(dir.join("000000.pgm"))?)?;
    let back = read_frame(&mut BufReader::new(File::open(dir.join("000000.pgm"))?), ImageFormat::Pnm, 0)?;
    println!("image {}x{} written and read back", back.image.width(), back.image.height());

    let poses: Vec<_> = traj.poses().copied().collect();
    let flow = flow_oracle(&world, &poses[0], &poses[1])?;
    let mean: f32 = flow.data().iter().map(|v| v.abs()).sum::<f32>() / flow.data().len() as f32;
    println!("flow 0->1: {}x{}, mean |component| {mean:.3} px", flow.width(), flow.height());
    write_flow(&flow, &mut File::create(dir.join("000000.flo"))?)?;
    let again = read_flow(&mut File::open(dir.join("000000.flo"))?)?;
    println!("flow round trip identical: {}", again == flow);

    write_pose_file(&traj, &mut File::create(dir.join("poses.txt"))?)?;
    let parsed = parse_pose_file(BufReader::new(File::open(dir.join("poses.txt"))?))?;
    println!("{} poses round-tripped into {}", parsed.len(), dir.display());
    Ok(())
}
