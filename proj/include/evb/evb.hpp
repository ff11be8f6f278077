#pragma once

#include "evb/check.hpp"
#include "evb/dataset.hpp"
#include "evb/divergence.hpp"
#include "evb/gaussian.hpp"
#include "evb/linalg.hpp"
#include "evb/matrix.hpp"
#include "evb/nets.hpp"
#include "evb/objectives.hpp"
#include "evb/ppca.hpp"
#include "evb/rng.hpp"
#include "evb/tape.hpp"
#include "evb/trainer.hpp"
