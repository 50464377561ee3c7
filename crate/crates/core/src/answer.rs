use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;
use crate::scene::{Color, Shape, Size};

/// A value from the closed answer vocabulary. Index order: yes, no, 0..=9,
/// colors, shapes, sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Answer {
    Yes,
    No,
    Number(u8),
    Color(Color),
    Shape(Shape),
    Size(Size),
}

pub const MAX_COUNT: usize = 9;
const NUMBER_BASE: usize = 2;
const COLOR_BASE: usize = NUMBER_BASE + MAX_COUNT + 1;
const SHAPE_BASE: usize = COLOR_BASE + 5;
const SIZE_BASE: usize = SHAPE_BASE + 3;
pub const ANSWER_VOCAB_SIZE: usize = SIZE_BASE + 2;

impl Answer {
    pub fn yes_no(b: bool) -> Answer {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn count(n: usize) -> crate::Result<Answer> {
        if n > MAX_COUNT {
            return Err(Error::CountOverflow(n));
        }
        Ok(Answer::Number(n as u8))
    }

    pub fn index(self) -> usize {
        match self {
            Answer::Yes => 0,
            Answer::No => 1,
            Answer::Number(n) => NUMBER_BASE + n as usize,
            Answer::Color(c) => COLOR_BASE + c.index(),
            Answer::Shape(s) => SHAPE_BASE + s.index(),
            Answer::Size(z) => SIZE_BASE + z.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Answer> {
        Some(match i {
            0 => Answer::Yes,
            1 => Answer::No,
            i if i < COLOR_BASE => Answer::Number((i - NUMBER_BASE) as u8),
            i if i < SHAPE_BASE => Answer::Color(Color::ALL[i - COLOR_BASE]),
            i if i < SIZE_BASE => Answer::Shape(Shape::ALL[i - SHAPE_BASE]),
            i if i < ANSWER_VOCAB_SIZE => Answer::Size(Size::ALL[i - SIZE_BASE]),
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Answer> {
        (0..ANSWER_VOCAB_SIZE).map(|i| Answer::from_index(i).expect("in range"))
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Yes => f.write_str("yes"),
            Answer::No => f.write_str("no"),
            Answer::Number(n) => write!(f, "{n}"),
            Answer::Color(c) => c.fmt(f),
            Answer::Shape(s) => s.fmt(f),
            Answer::Size(z) => z.fmt(f),
        }
    }
}

impl FromStr for Answer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Answer, Error> {
        Answer::all()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::UnknownAnswer(s.to_string()))
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Answer, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_fixed() {
        assert_eq!(ANSWER_VOCAB_SIZE, 22);
        let names: Vec<String> = Answer::all().map(|a| a.to_string()).collect();
        assert_eq!(names[..3], ["yes", "no", "0"]);
        assert_eq!(names[11], "9");
        assert_eq!(names[12], "red");
        assert_eq!(names[21], "large");
        for (i, a) in Answer::all().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(a.to_string().parse::<Answer>().unwrap(), a);
        }
        assert!(Answer::from_index(22).is_none());
    }

    #[test]
    fn count_is_capped() {
        assert!(matches!(Answer::count(10), Err(Error::CountOverflow(10))));
        assert_eq!(Answer::count(9).unwrap(), Answer::Number(9));
    }
}
