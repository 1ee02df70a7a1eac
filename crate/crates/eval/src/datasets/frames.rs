use super::manifest::{Benchmark, DatasetManifest};
use crate::error::{Error, Result};

/// Frame image ids of one video in ascending frame order, starting at 0.
pub fn load_frame_sequence(manifest: &DatasetManifest, video_id: &str) -> Result<Vec<String>> {
    if manifest.benchmark != Benchmark::Tiktok {
        return Err(Error::Config(format!("{} manifests hold no videos", manifest.benchmark)));
    }
    let mut frames: Vec<(u32, &str)> = manifest
        .items
        .iter()
        .filter(|i| i.video_id.as_deref() == Some(video_id))
        .map(|i| (i.frame_index.expect("validated"), i.id.as_str()))
        .collect();
    if frames.is_empty() {
        return Err(Error::UnknownVideo(video_id.to_string()));
    }
    frames.sort_unstable();
    if let Some((expected, (got, _))) = frames.iter().enumerate().find(|(n, (f, _))| *f as usize != *n) {
        return Err(Error::Frames {
            video: video_id.to_string(),
            reason: format!("frame {expected} is missing (next frame is {got})"),
        });
    }
    Ok(frames.into_iter().map(|(_, id)| id.to_string()).collect())
}

/// Video ids in sorted order.
pub fn video_ids(manifest: &DatasetManifest) -> Vec<String> {
    let mut ids: Vec<String> = manifest.items.iter().filter_map(|i| i.video_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ManifestItem;

    fn video(frames: &[u32]) -> DatasetManifest {
        let items = frames
            .iter()
            .map(|&f| ManifestItem {
                video_id: Some("v".into()),
                frame_index: Some(f),
                ..ManifestItem::new(format!("v_{f}"), format!("v/{f}.png"))
            })
            .collect();
        DatasetManifest::new(Benchmark::Tiktok, items).unwrap()
    }

    #[test]
    fn frames_come_back_sorted() {
        let m = video(&[3, 0, 9, 1, 2, 8, 4, 6, 5, 7]);
        let seq = load_frame_sequence(&m, "v").unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq, (0..10).map(|f| format!("v_{f}")).collect::<Vec<_>>());
        assert_eq!(load_frame_sequence(&video(&[0]), "v").unwrap(), vec!["v_0"]);
    }

    #[test]
    fn gaps_and_unknown_videos_fail() {
        let m = video(&[0, 1, 2, 4, 5]);
        let err = load_frame_sequence(&m, "v").unwrap_err();
        assert!(err.to_string().contains("frame 3"), "{err}");
        assert!(matches!(load_frame_sequence(&m, "w"), Err(Error::UnknownVideo(_))));
        assert!(load_frame_sequence(&video(&[1, 2]), "v").is_err());
    }
}
