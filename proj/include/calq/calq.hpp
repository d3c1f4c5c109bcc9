#pragma once

#include "calq/adam.hpp"
#include "calq/adaptive_round.hpp"
#include "calq/artifact.hpp"
#include "calq/bitpack.hpp"
#include "calq/config.hpp"
#include "calq/error.hpp"
#include "calq/linalg.hpp"
#include "calq/manifest.hpp"
#include "calq/matrix.hpp"
#include "calq/paired_transform.hpp"
#include "calq/pipeline.hpp"
#include "calq/quantizer.hpp"
#include "calq/random.hpp"
#include "calq/selfcheck.hpp"
#include "calq/single_transform.hpp"
#include "calq/synthetic.hpp"
