#pragma once

// Umbrella header for the cplab conformal prediction library.

#include "cplab/calibration.hpp"
#include "cplab/dataset.hpp"
#include "cplab/dataset_io.hpp"
#include "cplab/distance.hpp"
#include "cplab/evaluation.hpp"
#include "cplab/io.hpp"
#include "cplab/nettail.hpp"
#include "cplab/parallel.hpp"
#include "cplab/prediction.hpp"
#include "cplab/rng.hpp"
#include "cplab/scores.hpp"
