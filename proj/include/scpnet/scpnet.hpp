#pragma once

#include "data.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "numcore.hpp"
#include "prior.hpp"
#include "train.hpp"
