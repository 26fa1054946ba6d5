//! Minute-index calendar. Minute 0 is Monday 2017-09-04 00:00.

pub const MINUTES_PER_DAY: usize = 1440;
pub const MINUTES_PER_WEEK: usize = 10_080;

/// Days from 1970-01-01 to the epoch date.
const EPOCH_DAYS: i64 = 17_413;

pub const TIME_OF_DAY: [&str; 4] = ["morning_rush", "afternoon", "evening_rush", "night"];
pub const SEASONS: [&str; 4] = ["winter", "spring", "summer", "autumn"];

/// Table bins: 06-09 morning rush, 09-15 afternoon, 15-18 evening rush, else night.
pub fn time_of_day(minute: usize) -> &'static str {
    match minute % MINUTES_PER_DAY {
        360..=539 => "morning_rush",
        540..=899 => "afternoon",
        900..=1079 => "evening_rush",
        _ => "night",
    }
}

/// 0 = Monday.
pub fn weekday(minute: usize) -> usize {
    (minute / MINUTES_PER_DAY) % 7
}

pub fn is_weekend(minute: usize) -> bool {
    weekday(minute) >= 5
}

pub fn minute_of_week(minute: usize) -> usize {
    minute % MINUTES_PER_WEEK
}

// Civil date from days since 1970-01-01 (proleptic Gregorian).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

/// (year, month, day) of the given minute index.
pub fn date(minute: usize) -> (i64, u32, u32) {
    civil_from_days(EPOCH_DAYS + (minute / MINUTES_PER_DAY) as i64)
}

/// Meteorological season: Dec-Feb winter, Mar-May spring, Jun-Aug summer.
pub fn season(minute: usize) -> &'static str {
    match date(minute).1 {
        12 | 1 | 2 => "winter",
        3..=5 => "spring",
        6..=8 => "summer",
        _ => "autumn",
    }
}
