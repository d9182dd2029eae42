#!/usr/bin/env python
'''
wrapper around pandas with convenience functions for the result tables
written by the ssd-lab subcommands (fixed headers, CSV on disk)
'''
import os
from typing import Dict, List
import numpy as np
import pandas as pd


def makepath(path, raiseError=True):
    if path == '':
        return 0
    if not os.path.isdir(path):
        os.makedirs(path)
        if not os.path.isdir(path):
            if raiseError:
                raise RuntimeError(f'ERROR: Cannot create directory {path}')
            return 1
    return 0


def makepath4file(filename, raiseError=True):
    path = os.path.dirname(filename)
    if not os.path.isdir(path):
        return makepath(path, raiseError=raiseError)
    return 0


def AnotB(A, B, keeporder=False):
    if keeporder:
        # slower, but keeps order
        return [a for a in A if a not in B]
    return np.setdiff1d(A, B)


class pdtableclass:
    def __init__(self, columns: List[str] = None, **kwargs):
        """
        Initialize a table.

        :param columns: Fixed column order for the table. Rows added later are
        reindexed to these columns, so written headers never depend on which
        keys happened to appear in the first row.
        """
        self.columns = None if columns is None else list(columns)
        if self.columns is not None and 'columns' not in kwargs and 'data' not in kwargs:
            kwargs['columns'] = self.columns
        self.t = pd.DataFrame(**kwargs)

        # if a file is successfully loaded, the filename is saved here
        self.filename = None

    def load(self, filename, raiseError=True, verbose=False, **kwargs):
        try:
            if verbose:
                print(f'Loading {filename}')
            self.t = pd.read_csv(filename, **kwargs)
            self.filename = filename
        except Exception as e:
            print(f'ERROR: could not read {filename}!')
            if raiseError:
                raise RuntimeError(str(e))
            self.filename = None
            return 1

        if self.columns is not None:
            missing = AnotB(self.columns, list(self.t.columns), keeporder=True)
            if len(missing) > 0:
                msg = f'ERROR: table {filename} is missing columns {missing}'
                if raiseError:
                    raise RuntimeError(msg)
                print(msg)
                return 2
        return 0

    def write(self, filename=None, indices=None, columns=None, raiseError=True,
              overwrite=True, verbose=False, makepathFlag=True, **kwargs):
        indices = self.getindices(indices)

        if columns is None and self.columns is not None:
            columns = self.columns
        columns = self.getcolnames(columns)

        if filename is not None:
            if makepathFlag:
                if makepath4file(filename, raiseError=False):
                    errorstring = f'ERROR: could not make directory for {filename}'
                    if raiseError:
                        raise RuntimeError(errorstring)
                    return 1

            # if overwrite, then remove the old file first
            if os.path.isfile(filename):
                if overwrite:
                    os.remove(filename)
                else:
                    if raiseError:
                        raise RuntimeError(f'ERROR: file {filename} already exists! use overwrite option...')
                    print(f'Warning: file {filename} already exists, not deleting it, skipping!')
                    return 0

        if verbose and filename is not None:
            print(f'Saving {len(indices)} rows into {filename}')

        out = self.t.loc[indices, list(columns)]

        if filename is None:
            print(out.to_csv(index=False, lineterminator='\n', **kwargs), end='')
        else:
            out.to_csv(filename, index=False, lineterminator='\n', **kwargs)
            if not os.path.isfile(filename):
                errorstring = f'ERROR: could not save {filename}'
                if raiseError:
                    raise RuntimeError(errorstring)
                return 3
        return 0

    def getindices(self, indices=None):
        """make indices conform (input can be None, int, or list). The output is an array"""
        if indices is None:
            return self.t.index.values
        if isinstance(indices, (int, np.integer)):
            return np.array([indices])
        return np.array(indices)

    def getcolnames(self, colnames=None):
        """Return a list of all colnames if colnames=None. If colnames=string, return a list"""
        if colnames is None:
            return list(self.t.columns)
        if isinstance(colnames, str):
            return [colnames]
        return list(colnames)

    def ix_not_null(self, colnames=None, indices=None):
        indices = self.getindices(indices)
        for colname in self.getcolnames(colnames):
            (notnull,) = np.where(pd.notnull(self.t.loc[indices, colname]))
            indices = indices[notnull]
        return indices

    def ix_equal(self, colnames, val, indices=None):
        indices = self.getindices(indices)
        for colname in self.getcolnames(colnames):
            (keep,) = np.where(self.t.loc[indices, colname].eq(val))
            indices = indices[keep]
        return indices

    def ix_inrange(self, colnames=None, lowlim=None, uplim=None, indices=None,
                   exclude_lowlim=False, exclude_uplim=False):
        indices = self.getindices(indices)
        for colname in self.getcolnames(colnames):
            if lowlim is not None:
                if exclude_lowlim:
                    (keep,) = np.where(self.t.loc[indices, colname].gt(lowlim))
                else:
                    (keep,) = np.where(self.t.loc[indices, colname].ge(lowlim))
                indices = indices[keep]
            if uplim is not None:
                if exclude_uplim:
                    (keep,) = np.where(self.t.loc[indices, colname].lt(uplim))
                else:
                    (keep,) = np.where(self.t.loc[indices, colname].le(uplim))
                indices = indices[keep]
        return indices

    def newrow(self, dicti: Dict):
        row = pd.DataFrame([dicti])
        if self.columns is not None:
            extra = AnotB(list(dicti.keys()), self.columns, keeporder=True)
            if len(extra) > 0:
                raise RuntimeError(f'ERROR: unknown columns {extra} for this table')
            row = row.reindex(columns=self.columns)
        if len(self.t) == 0:
            self.t = row.reset_index(drop=True)
        else:
            self.t = pd.concat([self.t, row], axis=0, ignore_index=True)
        return self.t.index.values[-1]

    def __len__(self):
        return len(self.t)

    def __str__(self):
        return self.t.to_string()
