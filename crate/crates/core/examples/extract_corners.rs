//! Traces a region boundary and simplifies it to a capped corner list.

use lcec::masks::{extract_corners, trace_boundary, MaskObservation, Modality};

fn main() {
    let (w, h) = (40, 30);
    // an L-shaped region
    let region: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            (5..35).contains(&x) && (5..25).contains(&y) && !(x >= 20 && y < 15)
        })
        .collect();
    let contour = trace_boundary(&region, w, h);
    println!("boundary has {} points", contour.len());
    for cap in [4, 6, 8] {
        let corners = extract_corners(&contour, cap).unwrap();
        let pts: Vec<String> = corners.iter().map(|c| format!("({:.0},{:.0})", c.x, c.y)).collect();
        println!("cap {cap}: {}", pts.join(" "));
    }
    let pixels: Vec<(u32, u32)> = (0..w * h)
        .filter(|&i| region[i])
        .map(|i| ((i % w) as u32, (i / w) as u32))
        .collect();
    let m = MaskObservation::from_region(1, &pixels, Modality::Rgb, 8).unwrap();
    println!(
        "mask: center ({:.1}, {:.1}) size {}x{} area {}",
        m.center().x,
        m.center().y,
        m.width(),
        m.height(),
        m.area()
    );
}
