//! Stroke and silhouette templates for the procedural corpora, in a unit box
//! (x to the right, y downwards).

pub(crate) type Pt = (f32, f32);

pub(crate) struct Glyph {
    /// Open polylines drawn with a round brush.
    pub strokes: Vec<Vec<Pt>>,
    /// Closed filled polygons.
    pub fills: Vec<Vec<Pt>>,
    /// Polylines drawn dark on top of the fills (seams, zippers).
    pub seams: Vec<Vec<Pt>>,
}

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32) -> Vec<Pt> {
    let steps = (((to_deg - from_deg).abs() / 12.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f32 / steps as f32).to_radians();
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn join(mut a: Vec<Pt>, b: &[Pt]) -> Vec<Pt> {
    a.extend_from_slice(b);
    a
}

fn strokes(s: Vec<Vec<Pt>>) -> Glyph {
    Glyph {
        strokes: s,
        fills: vec![],
        seams: vec![],
    }
}

pub(crate) fn digit(d: usize) -> Glyph {
    strokes(match d {
        0 => vec![arc(0.5, 0.5, 0.3, 0.44, 0.0, 360.0)],
        1 => vec![vec![(0.36, 0.22), (0.55, 0.05), (0.55, 0.95)]],
        2 => vec![join(
            arc(0.5, 0.3, 0.28, 0.24, 190.0, 380.0),
            &[(0.18, 0.93), (0.86, 0.93)],
        )],
        3 => vec![
            arc(0.5, 0.28, 0.27, 0.22, 200.0, 450.0),
            arc(0.5, 0.71, 0.3, 0.23, 270.0, 520.0),
        ],
        4 => vec![vec![(0.62, 0.95), (0.62, 0.05), (0.12, 0.66), (0.88, 0.66)]],
        5 => vec![join(
            vec![(0.8, 0.06), (0.33, 0.06)],
            &arc(0.5, 0.66, 0.3, 0.28, 225.0, 500.0),
        )],
        6 => vec![
            arc(0.5, 0.69, 0.27, 0.25, 0.0, 360.0),
            arc(0.74, 0.64, 0.51, 0.58, 255.0, 180.0),
        ],
        7 => vec![vec![(0.15, 0.07), (0.85, 0.07), (0.42, 0.95)]],
        8 => vec![
            arc(0.5, 0.28, 0.23, 0.21, 0.0, 360.0),
            arc(0.5, 0.71, 0.28, 0.24, 0.0, 360.0),
        ],
        _ => vec![
            arc(0.5, 0.32, 0.26, 0.25, 0.0, 360.0),
            vec![(0.76, 0.32), (0.7, 0.95)],
        ],
    })
}

/// A, E, H, K, M, N, R, T, W, X.
pub(crate) fn letter(l: usize) -> Glyph {
    strokes(match l {
        0 => vec![
            vec![(0.15, 0.95), (0.5, 0.05), (0.85, 0.95)],
            vec![(0.3, 0.6), (0.7, 0.6)],
        ],
        1 => vec![
            vec![(0.8, 0.05), (0.2, 0.05), (0.2, 0.95), (0.8, 0.95)],
            vec![(0.2, 0.5), (0.7, 0.5)],
        ],
        2 => vec![
            vec![(0.2, 0.05), (0.2, 0.95)],
            vec![(0.8, 0.05), (0.8, 0.95)],
            vec![(0.2, 0.5), (0.8, 0.5)],
        ],
        3 => vec![
            vec![(0.22, 0.05), (0.22, 0.95)],
            vec![(0.8, 0.05), (0.22, 0.58)],
            vec![(0.4, 0.45), (0.82, 0.95)],
        ],
        4 => vec![vec![(0.12, 0.95), (0.18, 0.05), (0.5, 0.6), (0.82, 0.05), (0.88, 0.95)]],
        5 => vec![vec![(0.2, 0.95), (0.2, 0.05), (0.8, 0.95), (0.8, 0.05)]],
        6 => vec![
            join(
                join(vec![(0.22, 0.95), (0.22, 0.05), (0.55, 0.05)], &arc(0.55, 0.27, 0.25, 0.22, 270.0, 450.0)),
                &[(0.22, 0.49)],
            ),
            vec![(0.45, 0.49), (0.82, 0.95)],
        ],
        7 => vec![
            vec![(0.12, 0.06), (0.88, 0.06)],
            vec![(0.5, 0.06), (0.5, 0.95)],
        ],
        8 => vec![vec![(0.1, 0.05), (0.28, 0.95), (0.5, 0.35), (0.72, 0.95), (0.9, 0.05)]],
        _ => vec![
            vec![(0.18, 0.05), (0.82, 0.95)],
            vec![(0.82, 0.05), (0.18, 0.95)],
        ],
    })
}

/// T-shirt, trouser, pullover, dress, coat, sandal, shirt, sneaker, bag, boot.
pub(crate) fn garment(g: usize) -> Glyph {
    let tshirt = vec![
        (0.3, 0.1), (0.42, 0.1), (0.5, 0.18), (0.58, 0.1), (0.7, 0.1), (0.95, 0.3),
        (0.85, 0.45), (0.75, 0.38), (0.75, 0.95), (0.25, 0.95), (0.25, 0.38),
        (0.15, 0.45), (0.05, 0.3),
    ];
    let pullover = vec![
        (0.3, 0.08), (0.7, 0.08), (0.92, 0.25), (0.98, 0.9), (0.82, 0.9), (0.76, 0.4),
        (0.76, 0.95), (0.24, 0.95), (0.24, 0.4), (0.18, 0.9), (0.02, 0.9), (0.08, 0.25),
    ];
    let (fills, strokes, seams) = match g {
        0 => (vec![tshirt], vec![], vec![]),
        1 => (
            vec![vec![(0.25, 0.05), (0.75, 0.05), (0.8, 0.95), (0.58, 0.95), (0.5, 0.35), (0.42, 0.95), (0.2, 0.95)]],
            vec![],
            vec![],
        ),
        2 => (vec![pullover], vec![], vec![]),
        3 => (
            vec![vec![(0.4, 0.05), (0.6, 0.05), (0.62, 0.35), (0.85, 0.95), (0.15, 0.95), (0.38, 0.35)]],
            vec![],
            vec![],
        ),
        4 => (vec![pullover], vec![], vec![vec![(0.5, 0.1), (0.5, 0.95)]]),
        5 => (
            vec![vec![(0.05, 0.8), (0.95, 0.7), (0.95, 0.8), (0.05, 0.9)]],
            vec![
                vec![(0.15, 0.82), (0.3, 0.45), (0.45, 0.78)],
                vec![(0.5, 0.76), (0.65, 0.4), (0.8, 0.72)],
            ],
            vec![],
        ),
        6 => (
            vec![tshirt],
            vec![],
            vec![vec![(0.5, 0.18), (0.5, 0.95)], vec![(0.25, 0.55), (0.75, 0.55)]],
        ),
        7 => (
            vec![vec![(0.05, 0.55), (0.45, 0.5), (0.6, 0.35), (0.75, 0.4), (0.95, 0.65), (0.95, 0.8), (0.05, 0.8)]],
            vec![],
            vec![vec![(0.05, 0.72), (0.95, 0.72)]],
        ),
        8 => (
            vec![vec![(0.12, 0.35), (0.88, 0.35), (0.92, 0.92), (0.08, 0.92)]],
            vec![arc(0.5, 0.35, 0.22, 0.22, 180.0, 360.0)],
            vec![],
        ),
        _ => (
            vec![vec![(0.3, 0.05), (0.65, 0.05), (0.65, 0.55), (0.95, 0.72), (0.95, 0.9), (0.3, 0.9)]],
            vec![],
            vec![],
        ),
    };
    Glyph {
        strokes,
        fills,
        seams,
    }
}
