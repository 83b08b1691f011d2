use super::{Action, Quality, SubStitchAnnotation, Task};
use crate::error::{Error, Result};

const IDEAL_PREFIX: &str = "An ideal clip of a needle ";
const NON_IDEAL_PREFIX: &str = "A non-ideal clip of a needle ";
const ACTION_INFIX: &str = " action during a ";
const SUFFIX: &str = " task.";

/// Renders the annotation's caption, e.g.
/// `"A non-ideal clip of a needle driving action during a backhand task."`
pub fn generate_caption(annotation: &SubStitchAnnotation) -> String {
    caption_for(annotation.quality, annotation.action, annotation.task)
}

pub(crate) fn caption_for(quality: Quality, action: Action, task: Task) -> String {
    let prefix = match quality {
        Quality::Ideal => IDEAL_PREFIX,
        Quality::NonIdeal => NON_IDEAL_PREFIX,
    };
    format!("{prefix}{action}{ACTION_INFIX}{task}{SUFFIX}")
}

/// Recovers `(quality, action, task)` from a caption produced by
/// [`generate_caption`]. Anything else is a [`Error::MalformedCaption`].
pub fn parse_caption(caption: &str) -> Result<(Quality, Action, Task)> {
    let malformed = || Error::MalformedCaption(caption.to_string());
    let (quality, rest) = if let Some(rest) = caption.strip_prefix(IDEAL_PREFIX) {
        (Quality::Ideal, rest)
    } else if let Some(rest) = caption.strip_prefix(NON_IDEAL_PREFIX) {
        (Quality::NonIdeal, rest)
    } else {
        return Err(malformed());
    };
    let rest = rest.strip_suffix(SUFFIX).ok_or_else(malformed)?;
    let (action, task) = rest.split_once(ACTION_INFIX).ok_or_else(malformed)?;
    let action = action.parse::<Action>().map_err(|_| malformed())?;
    let task = task.parse::<Task>().map_err(|_| malformed())?;
    Ok((quality, action, task))
}
