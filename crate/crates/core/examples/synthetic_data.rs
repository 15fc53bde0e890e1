//! Renders the moving-square dataset, stores it as SQVD and prints the
//! first frames of one video.

use squeezetime::data::{generate_dataset, read_sqvd, write_sqvd, Direction, SyntheticVideoSpec};

fn main() -> squeezetime::Result<()> {
    let spec = SyntheticVideoSpec {
        per_class: 2,
        resolution: (12, 24),
        length: 8,
        object_size: 3,
        speed: 2,
        ..SyntheticVideoSpec::default()
    };
    let ds = generate_dataset(&spec)?;
    let path = std::env::temp_dir().join("squeezetime_example.sqvd");
    write_sqvd(&ds, &path)?;
    let back = read_sqvd(&path)?;
    assert_eq!(back, ds);
    println!("{} videos written to {} and read back", ds.len(), path.display());

    let video = &ds.records[0];
    let (h, w) = video.resolution();
    println!("label {}", Direction::from_label(video.label).map_or("?", |d| d.name()));
    for t in 0..3 {
        println!("frame {t}");
        let frame = &video.frames.data()[t * h * w..][..h * w];
        for row in frame.chunks(w) {
            println!("  {}", row.iter().map(|&v| if v > 0.5 { '#' } else { '.' }).collect::<String>());
        }
    }
    Ok(())
}
