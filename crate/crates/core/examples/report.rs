//! Prints the comparison table with a measured row appended.

use atdn::evaluation::{table1_report, table1_tsv, ReportRow};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mine = ReportRow::new("Ours (synthetic)", Some(0.0436), Some(0.00175), Some(0.004), "CPU");
    table1_report(std::slice::from_ref(&mine), Some("measured on a synthetic loop, not KITTI"), &mut std::io::stdout())?;
    println!();
    print!("{}", table1_tsv(&[mine]));
    Ok(())
}
