#pragma once

#include "edgeless/distributions.hpp"
#include "edgeless/evaluation.hpp"
#include "edgeless/inference.hpp"
#include "edgeless/io.hpp"
#include "edgeless/model.hpp"
#include "edgeless/sweep.hpp"
#include "edgeless/synthesis.hpp"
