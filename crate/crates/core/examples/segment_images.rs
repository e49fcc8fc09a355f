//! Cuts a pixel stream into fixed-size grayscale images, restores it, and
//! stores the images in the binary bundle format.

use cftrace::imager::{reassemble, segment, segment_count, to_three_channel, ImageBundle};
use cftrace::pixel::PixelStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let side = 16;
    let pixels: Vec<u8> = (0..700u32).map(|i| (i * 7 % 251) as u8).collect();
    let stream = PixelStream::new("demo", pixels);
    let series = segment(&stream, side)?;
    println!(
        "{} pixels -> {} images of {side}x{side} (expected {})",
        stream.len(),
        series.len(),
        segment_count(stream.len(), side)
    );
    let last = series.images.last().expect("non-empty");
    println!(
        "padding in last image: {} zero pixels",
        last.as_bytes()
            .iter()
            .rev()
            .take_while(|&&p| p == 0)
            .count()
    );
    assert_eq!(reassemble(&series)?, stream);

    let rgb = to_three_channel(&series.images[0]);
    println!(
        "first image mean {:.2}, as RGB {} bytes",
        series.images[0].mean(),
        rgb.as_bytes().len()
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.hnimg");
    ImageBundle::from_gray(side, &series.images).save(&path)?;
    let loaded = ImageBundle::load(&path)?.to_gray()?;
    println!(
        "bundle of {} bytes restores {} images",
        std::fs::metadata(&path)?.len(),
        loaded.len()
    );
    Ok(())
}
