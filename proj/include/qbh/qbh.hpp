#pragma once

#include "qbh/distribution.hpp"
#include "qbh/error.hpp"
#include "qbh/evalrank.hpp"
#include "qbh/events.hpp"
#include "qbh/io.hpp"
#include "qbh/lattice.hpp"
#include "qbh/model.hpp"
#include "qbh/params.hpp"
#include "qbh/simulate.hpp"
#include "qbh/training.hpp"
