use serde::{Deserialize, Serialize};

pub const NUM_TASKS: usize = 5;

/// Task names in output order.
pub const TASK_NAMES: [&str; NUM_TASKS] = ["Calories", "Mass", "Fat", "Carb.", "Protein"];

pub const TASK_UNITS: [&str; NUM_TASKS] = ["kcal", "g", "g", "g", "g"];

/// Regression target: calories (kcal), mass, fat, carbohydrate and protein (g).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NutritionVector {
    pub calories: f64,
    pub mass: f64,
    pub fat: f64,
    pub carbohydrate: f64,
    pub protein: f64,
}

impl NutritionVector {
    pub fn from_array(v: [f64; NUM_TASKS]) -> Self {
        NutritionVector { calories: v[0], mass: v[1], fat: v[2], carbohydrate: v[3], protein: v[4] }
    }

    pub fn to_array(self) -> [f64; NUM_TASKS] {
        [self.calories, self.mass, self.fat, self.carbohydrate, self.protein]
    }

    pub fn scaled(self, s: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * s))
    }

    pub fn add(self, other: Self) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.to_array().iter().all(|v| *v >= 0.0 && v.is_finite())
    }
}

impl std::iter::Sum for NutritionVector {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(NutritionVector::default(), NutritionVector::add)
    }
}
